#include "efh/training/data.hpp"

#include <algorithm>
#include <cstdlib>
#include <istream>
#include <ostream>
#include <thread>

#include <json.hpp>

#include "efh/numcore/errors.hpp"

namespace efh::training {

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::od: return "OD";
    case TaskKind::grounding: return "grounding";
    case TaskKind::hoi: return "HOI";
    case TaskKind::phrase_grounding: return "phrase-grounding";
  }
  return "OD";
}

TaskKind parse_task_kind(const std::string& name) {
  for (TaskKind k : {TaskKind::od, TaskKind::grounding, TaskKind::hoi, TaskKind::phrase_grounding}) {
    if (to_string(k) == name) return k;
  }
  throw ArgumentError("unknown task kind '" + name + "'");
}

void TaskSample::validate() const {
  if (labels.empty()) throw ArgumentError("task sample '" + image + "' has no labels");
  if (prompt.empty()) throw ArgumentError("task sample '" + image + "' has an empty prompt");
  gt.validate(labels.size());
}

std::vector<std::string> default_templates() {
  return {"Detect objects in {}", "Where is the location of {}", "Find {} in the image"};
}

std::string ing_form(const std::string& verb) {
  if (verb.size() > 2 && verb.back() == 'e' && verb[verb.size() - 2] != 'e') {
    return verb.substr(0, verb.size() - 1) + "ing";
  }
  return verb + "ing";
}

std::string ed_form(const std::string& verb) {
  if (!verb.empty() && verb.back() == 'e') return verb + "d";
  return verb + "ed";
}

namespace {

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::string fill(const std::string& form, const std::string& labels) {
  const auto at = form.find("{}");
  if (at == std::string::npos) throw ArgumentError("template '" + form + "' lacks a {} slot");
  return form.substr(0, at) + labels + form.substr(at + 2);
}

std::string label_prompt(const std::vector<std::string>& labels,
                         const std::vector<std::string>& templates, CounterRng& rng,
                         std::size_t max_chars) {
  if (templates.empty()) throw ArgumentError("no prompt templates");
  const std::string& form = templates[rng.below(templates.size())];
  std::string prompt = fill(form, join(labels, ", "));
  return prompt.size() <= max_chars ? prompt : std::string(kFallbackPrompt);
}

/// Cuts at most `max` bytes without splitting a UTF-8 sequence.
std::string truncate_utf8(const std::string& s, std::size_t max) {
  if (s.size() <= max) return s;
  std::size_t end = max;
  while (end > 0 && (static_cast<unsigned char>(s[end]) & 0xC0) == 0x80) --end;
  return s.substr(0, end);
}

std::size_t intern(std::vector<std::string>& labels, const std::string& name) {
  auto it = std::find(labels.begin(), labels.end(), name);
  if (it != labels.end()) return static_cast<std::size_t>(it - labels.begin());
  labels.push_back(name);
  return labels.size() - 1;
}

}  // namespace

TaskSample convert_task(const RawAnnotation& raw, const std::string& kind,
                        const std::vector<std::string>& templates, CounterRng& rng,
                        std::size_t max_prompt_chars) {
  const TaskKind k = parse_task_kind(kind);
  if (max_prompt_chars < std::string(kFallbackPrompt).size()) {
    throw ArgumentError("max prompt length is shorter than the fallback prompt");
  }
  TaskSample s;
  s.image = raw.image;
  s.kind = k;
  if (k == TaskKind::hoi) {
    std::vector<double> boxes;
    for (const auto& t : raw.triplets) {
      const std::size_t subj = intern(s.labels, ing_form(t.verb) + " " + t.subject);
      const std::size_t obj = intern(s.labels, ed_form(t.verb) + " " + t.object);
      s.gt.labels.push_back(subj);
      boxes.insert(boxes.end(), t.subject_box.begin(), t.subject_box.end());
      s.gt.labels.push_back(obj);
      boxes.insert(boxes.end(), t.object_box.begin(), t.object_box.end());
    }
    s.gt.boxes = TensorD({s.gt.labels.size(), 4}, std::move(boxes));
    s.prompt = label_prompt(s.labels, templates, rng, max_prompt_chars);
  } else {
    s.labels = raw.labels;
    s.gt.boxes = raw.boxes;
    s.gt.labels = raw.label_ids;
    if (k == TaskKind::grounding) {
      if (raw.caption.empty()) throw ArgumentError("grounding annotation without a caption");
      s.prompt = truncate_utf8(raw.caption, max_prompt_chars);
    } else {
      s.prompt = label_prompt(s.labels, templates, rng, max_prompt_chars);
    }
  }
  s.gt.image = raw.image;
  s.validate();
  return s;
}

std::string ShapeClass::name() const {
  switch (form) {
    case ShapeForm::circle: return color + " circle";
    case ShapeForm::square: return color + " square";
    case ShapeForm::triangle: return color + " triangle";
  }
  return color;
}

std::vector<ShapeClass> default_vocabulary() {
  const std::array<float, 3> red{0.9f, 0.1f, 0.1f}, green{0.1f, 0.8f, 0.2f}, blue{0.15f, 0.25f, 0.95f},
      yellow{0.95f, 0.9f, 0.1f};
  return {{"red", red, ShapeForm::circle},     {"red", red, ShapeForm::square},
          {"red", red, ShapeForm::triangle},   {"green", green, ShapeForm::circle},
          {"green", green, ShapeForm::square}, {"blue", blue, ShapeForm::circle},
          {"blue", blue, ShapeForm::triangle}, {"yellow", yellow, ShapeForm::square}};
}

namespace {

bool inside(ShapeForm form, double px, double py, double x0, double y0, double side) {
  const double u = (px - x0) / side, v = (py - y0) / side;  // in [0,1]^2 for the square
  if (u < 0 || u > 1 || v < 0 || v > 1) return false;
  switch (form) {
    case ShapeForm::square: return true;
    case ShapeForm::circle: return (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.25;
    case ShapeForm::triangle: return std::abs(u - 0.5) <= 0.5 * v;  // apex at the top
  }
  return false;
}

}  // namespace

SyntheticScene generate_synthetic_scene(std::uint64_t seed, std::size_t canvas,
                                        const std::vector<ShapeClass>& vocab) {
  if (canvas == 0 || canvas % 32 != 0) throw ArgumentError("canvas must be a positive multiple of 32");
  if (vocab.empty()) throw ArgumentError("empty shape vocabulary");
  CounterRng rng(seed, 0x5CE4E);
  SyntheticScene scene;
  for (const auto& c : vocab) scene.labels.push_back(c.name());
  scene.image = TensorF({canvas, canvas, 3}, 0.12f);
  scene.gt.image = "synthetic:" + std::to_string(seed);

  const double n = static_cast<double>(canvas);
  const double min_side = n * 12.0 / 64.0, max_side = n * 24.0 / 64.0;
  const std::size_t wanted = 1 + rng.below(6);
  struct Placed {
    double x0, y0, side;
  };
  std::vector<Placed> placed;
  std::vector<double> boxes;
  for (int attempt = 0; attempt < 400 && placed.size() < wanted; ++attempt) {
    const double side = std::floor(rng.uniform(min_side, max_side + 1));
    const double x0 = std::floor(rng.uniform(0, n - side + 1));
    const double y0 = std::floor(rng.uniform(0, n - side + 1));
    bool clear = true;
    for (const auto& p : placed) {
      if (x0 < p.x0 + p.side + 1 && p.x0 < x0 + side + 1 && y0 < p.y0 + p.side + 1 &&
          p.y0 < y0 + side + 1) {
        clear = false;
      }
    }
    if (!clear) continue;
    const std::size_t cls = rng.below(vocab.size());
    const ShapeClass& shape = vocab[cls];
    std::size_t bx0 = canvas, by0 = canvas, bx1 = 0, by1 = 0;
    for (std::size_t y = static_cast<std::size_t>(y0); y < static_cast<std::size_t>(y0 + side); ++y) {
      for (std::size_t x = static_cast<std::size_t>(x0); x < static_cast<std::size_t>(x0 + side); ++x) {
        if (!inside(shape.form, x + 0.5, y + 0.5, x0, y0, side)) continue;
        for (int c = 0; c < 3; ++c) scene.image.at(y, x, c) = shape.rgb[c];
        bx0 = std::min(bx0, x);
        by0 = std::min(by0, y);
        bx1 = std::max(bx1, x);
        by1 = std::max(by1, y);
      }
    }
    placed.push_back({x0, y0, side});
    const double w = double(bx1 - bx0 + 1), h = double(by1 - by0 + 1);
    boxes.insert(boxes.end(), {(bx0 + w / 2) / n, (by0 + h / 2) / n, w / n, h / n});
    scene.gt.labels.push_back(cls);
  }
  scene.gt.boxes = TensorD({scene.gt.labels.size(), 4}, std::move(boxes));
  return scene;
}

std::size_t data_threads() {
  if (const char* env = std::getenv("EFH_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

std::vector<SyntheticScene> synthetic_dataset(std::uint64_t seed, std::size_t first,
                                              std::size_t count, std::size_t canvas,
                                              const std::vector<ShapeClass>& vocab) {
  std::vector<SyntheticScene> out(count);
  const std::size_t workers = std::min(data_threads(), std::max<std::size_t>(count, 1));
  auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < count; i += workers) {
      out[i] = generate_synthetic_scene(CounterRng::mix(seed) ^ (first + i), canvas, vocab);
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work, w);
  work(0);
  for (auto& t : pool) t.join();
  return out;
}

void write_task_samples(std::ostream& os, const std::vector<TaskSample>& samples) {
  for (const auto& s : samples) {
    nlohmann::json j;
    j["image"] = s.image;
    j["prompt"] = s.prompt;
    j["labels"] = s.labels;
    nlohmann::json boxes = nlohmann::json::array();
    for (std::size_t i = 0; i < s.gt.size(); ++i) {
      const Box b = s.gt.box(i);
      boxes.push_back({b[0], b[1], b[2], b[3]});
    }
    j["boxes"] = boxes;
    j["label_ids"] = s.gt.labels;
    j["task"] = to_string(s.kind);
    os << j.dump() << '\n';
  }
}

std::vector<TaskSample> read_task_samples(std::istream& is) {
  std::vector<TaskSample> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(is, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TaskSample s;
      s.image = j.at("image").get<std::string>();
      s.prompt = j.at("prompt").get<std::string>();
      s.labels = j.at("labels").get<std::vector<std::string>>();
      const auto boxes = j.at("boxes").get<std::vector<std::vector<double>>>();
      s.gt.labels = j.at("label_ids").get<std::vector<std::size_t>>();
      s.gt.boxes = TensorD({boxes.size(), 4});
      for (std::size_t i = 0; i < boxes.size(); ++i) {
        if (boxes[i].size() != 4) throw FormatError("box with " + std::to_string(boxes[i].size()) + " values");
        for (int c = 0; c < 4; ++c) s.gt.boxes.at(i, c) = boxes[i][c];
      }
      s.gt.image = s.image;
      s.kind = parse_task_kind(j.at("task").get<std::string>());
      s.validate();
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("task samples line " + std::to_string(number) + ": " + e.what());
    } catch (const ArgumentError& e) {
      throw FormatError("task samples line " + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace efh::training
