#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "efh/bench_cli/config.hpp"
#include "efh/bench_cli/report.hpp"

namespace efh::bench_cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;     // missing file, malformed input, bad arguments
inline constexpr int kExitNumeric = 3;   // non-finite loss during training

struct DetectArgs {
  std::string config;                  // empty: defaults
  std::string checkpoint;              // empty: seeded initialization
  std::vector<std::string> images;     // --image, repeatable
  std::string image_dir;               // --images
  std::string labels;                  // "a,b,c"
  std::optional<std::string> prompt;   // default built from the labels
  bool cache = true;
  std::string out;                     // file for one --image, else a directory
};

struct TrainArgs {
  std::string config;
  std::size_t steps = 0;
  std::optional<std::uint64_t> seed;   // default: config seed
  std::string dataset = "synthetic";   // or a TaskSample JSON-lines file
  std::string out;                     // checkpoint path
  std::string metrics;                 // default: <out>.metrics.jsonl
  bool eval = false;
};

struct BenchArgs {
  std::string config;
  std::string checkpoint;
  std::string image_dir;
  std::size_t iters = 100;
  std::size_t warmup = 10;
  bool cache = true;
  std::string out;
  std::string format = "json";
  std::string labels;                  // default: the synthetic vocabulary
  std::optional<std::string> prompt;
};

/// Each command reports problems on `err` and returns an exit code.
int cmd_detect(const DetectArgs& args, std::ostream& out, std::ostream& err);
int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err);
int cmd_bench(const BenchArgs& args, std::ostream& out, std::ostream& err,
              ModuleTimings* result = nullptr);

/// Comma-separated labels, trimmed. Throws ArgumentError on an empty list
/// or an empty entry.
std::vector<std::string> split_labels(const std::string& text);

/// Prompt used when none is given: first template over the labels, with
/// the fallback prompt when too long.
std::string default_prompt(const std::vector<std::string>& labels, std::size_t max_chars);

/// Sorted .ppm and .tnsr files of a directory.
std::vector<std::string> list_images(const std::string& dir);

/// Config (or defaults) plus checkpoint (or seeded initialization), with
/// the checkpoint's names and shapes checked against the config.
struct LoadedModel {
  ModelConfig config;
  ParamStore<float> params;
};
LoadedModel load_model(const std::string& config, const std::string& checkpoint);

}  // namespace efh::bench_cli
