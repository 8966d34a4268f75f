#pragma once

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

#include "efh/numcore/rng.hpp"
#include "efh/training/matching.hpp"

namespace efh::training {

enum class TaskKind { od, grounding, hoi, phrase_grounding };

/// "OD", "grounding", "HOI", "phrase-grounding".
std::string to_string(TaskKind kind);
/// Throws ArgumentError on an unknown name.
TaskKind parse_task_kind(const std::string& name);

/// One training example in prompt form.
struct TaskSample {
  std::string image;
  std::string prompt;
  std::vector<std::string> labels;
  GroundTruth gt;
  TaskKind kind = TaskKind::od;

  void validate() const;
};

struct HoiTriplet {
  std::string subject;
  std::string verb;
  std::string object;
  Box subject_box{};
  Box object_box{};
};

/// Annotation before conversion. OD and phrase grounding use `labels`,
/// `boxes` and `label_ids`; grounding adds `caption` (labels are its
/// phrases); HOI uses `triplets` only.
struct RawAnnotation {
  std::string image;
  std::vector<std::string> labels;
  TensorD boxes{Shape{0, 4}};
  std::vector<std::size_t> label_ids;
  std::string caption;
  std::vector<HoiTriplet> triplets;
};

inline constexpr const char* kFallbackPrompt = "Detect all objects in the image";

/// Prefix forms; "{}" is replaced by the comma-joined labels.
std::vector<std::string> default_templates();

/// "ride" -> "riding", "hold" -> "holding".
std::string ing_form(const std::string& verb);
/// "ride" -> "rided", "hold" -> "holded". Regular inflection only.
std::string ed_form(const std::string& verb);

/// Builds the prompt and label list for `kind`. Prompts never exceed
/// `max_prompt_chars` bytes: joined-label prompts fall back to
/// kFallbackPrompt and captions are cut at a character boundary.
TaskSample convert_task(const RawAnnotation& raw, const std::string& kind,
                        const std::vector<std::string>& templates, CounterRng& rng,
                        std::size_t max_prompt_chars);

// Synthetic scenes -----------------------------------------------------

enum class ShapeForm { circle, square, triangle };

struct ShapeClass {
  std::string color;
  std::array<float, 3> rgb{};
  ShapeForm form = ShapeForm::circle;

  std::string name() const;
};

/// red circle, red square, red triangle, green circle, green square,
/// blue circle, blue triangle, yellow square.
std::vector<ShapeClass> default_vocabulary();

struct SyntheticScene {
  TensorF image;                    // [canvas, canvas, 3] in [0,1]
  GroundTruth gt;                   // tight pixel boxes
  std::vector<std::string> labels;  // the whole vocabulary
};

/// 1 to 6 non-overlapping shapes with sides of 3/16 to 3/8 of the canvas.
/// Deterministic per seed. Canvas must be a positive multiple of 32.
SyntheticScene generate_synthetic_scene(std::uint64_t seed, std::size_t canvas,
                                        const std::vector<ShapeClass>& vocab);

/// Worker threads for data generation: EFH_THREADS if set, else the
/// hardware concurrency, at least 1.
std::size_t data_threads();

/// Scenes first .. first+count-1 of the stream keyed by `seed`, built in
/// parallel. Scene i depends only on (seed, i).
std::vector<SyntheticScene> synthetic_dataset(std::uint64_t seed, std::size_t first,
                                              std::size_t count, std::size_t canvas,
                                              const std::vector<ShapeClass>& vocab);

// TaskSample JSON lines ------------------------------------------------

void write_task_samples(std::ostream& os, const std::vector<TaskSample>& samples);
/// Throws FormatError with the line number on malformed input.
std::vector<TaskSample> read_task_samples(std::istream& is);

}  // namespace efh::training
