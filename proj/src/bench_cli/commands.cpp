#include "efh/bench_cli/commands.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <ostream>

#include <json.hpp>

namespace efh::bench_cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Maps exceptions to exit codes.
int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) throw ArgumentError(std::string(what) + " '" + path + "' not found");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

void write_file(const fs::path& path, const std::string& body) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write '" + path.string() + "'");
  os << body;
  if (!os.flush()) throw FormatError("cannot write '" + path.string() + "'");
}

}  // namespace

std::vector<std::string> split_labels(const std::string& text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const std::string item =
        trim(text.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (item.empty()) throw ArgumentError("empty label in '" + text + "'");
    out.push_back(item);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string default_prompt(const std::vector<std::string>& labels, std::size_t max_chars) {
  std::string joined;
  for (std::size_t i = 0; i < labels.size(); ++i) joined += (i ? ", " : "") + labels[i];
  const std::string form = training::default_templates().front();
  std::string prompt = form.substr(0, form.find("{}")) + joined + form.substr(form.find("{}") + 2);
  return prompt.size() <= max_chars ? prompt : std::string(training::kFallbackPrompt);
}

std::vector<std::string> list_images(const std::string& dir) {
  if (!fs::is_directory(dir)) throw ArgumentError("image directory '" + dir + "' not found");
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".ppm" || ext == ".tnsr")) out.push_back(e.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

LoadedModel load_model(const std::string& config, const std::string& checkpoint) {
  LoadedModel m;
  if (!config.empty()) {
    require_file(config, "config");
    m.config = load_model_config(config);
  }
  const auto arch = m.config.arch();
  model::init_model(m.params, m.config.seed, arch);
  if (!checkpoint.empty()) {
    require_file(checkpoint, "checkpoint");
    auto loaded = training::load_checkpoint<float>(fs::path(checkpoint));
    if (loaded.size() != m.params.size()) {
      throw FormatError("checkpoint has " + std::to_string(loaded.size()) + " tensors, config expects " +
                        std::to_string(m.params.size()));
    }
    for (const auto& [name, e] : m.params.entries()) {
      if (!loaded.contains(name)) throw FormatError("checkpoint lacks parameter '" + name + "'");
      if (loaded.get(name).shape() != e.value.shape()) {
        throw FormatError("checkpoint parameter '" + name + "' has shape " +
                          shape_str(loaded.get(name).shape()) + ", config expects " +
                          shape_str(e.value.shape()));
      }
    }
    m.params = std::move(loaded);
  }
  textenc::apply_text_freeze(m.params, arch.text);
  return m;
}

int cmd_detect(const DetectArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    std::vector<std::string> images = args.images;
    if (!args.image_dir.empty()) {
      const auto listed = list_images(args.image_dir);
      images.insert(images.end(), listed.begin(), listed.end());
    }
    if (images.empty()) throw ArgumentError("no input images");
    for (const auto& p : images) require_file(p, "image");
    if (args.out.empty()) throw ArgumentError("--out is required");
    const bool single_file = args.image_dir.empty() && images.size() == 1;

    const auto labels = split_labels(args.labels);
    LoadedModel m = load_model(args.config, args.checkpoint);
    const std::size_t max_chars = m.config.text_max_len - 1;
    const std::string prompt = args.prompt ? *args.prompt : default_prompt(labels, max_chars);
    if (trim(prompt).empty()) throw ArgumentError("prompt is empty");

    const model::Detector detector(m.config.arch(), std::move(m.params));
    textenc::LanguageCache<float> cache;
    std::vector<std::pair<fs::path, std::string>> results;
    for (const auto& path : images) {
      auto set = detector.detect(imgbackbone::load_image(path), labels, prompt,
                                 args.cache ? &cache : nullptr);
      set.image = path;
      const fs::path target =
          single_file ? fs::path(args.out) : fs::path(args.out) / (fs::path(path).stem().string() + ".json");
      results.emplace_back(target, ela_decoder::detections_json(set) + "\n");
    }
    if (!single_file) fs::create_directories(args.out);
    for (const auto& [target, body] : results) {
      write_file(target, body);
      out << "wrote " << target.string() << "\n";
    }
    return kExitOk;
  });
}

namespace {

json breakdown_json(std::size_t step, double lr, const training::LossBreakdown& b) {
  return {{"step", step},         {"lr", lr},
          {"loss", b.total},      {"od", b.od_total},
          {"dn", b.dn_total},     {"od_cls", b.od.cls},
          {"od_l1", b.od.l1},     {"od_giou", b.od.giou},
          {"dn_cls", b.dn.cls},   {"dn_l1", b.dn.l1},
          {"dn_giou", b.dn.giou}};
}

std::vector<training::TrainExample> synthetic_examples(const ModelConfig& cfg, std::uint64_t seed,
                                                       std::size_t first, std::size_t count) {
  const auto scenes = training::synthetic_dataset(seed, first, count, cfg.canvas,
                                                  training::default_vocabulary());
  CounterRng rng(seed, CounterRng::hash("prompts") + first);
  std::vector<training::TrainExample> out;
  for (const auto& s : scenes) {
    training::RawAnnotation raw;
    raw.image = s.gt.image;
    raw.labels = s.labels;
    raw.boxes = s.gt.boxes;
    raw.label_ids = s.gt.labels;
    out.push_back({s.image, training::convert_task(raw, "OD", training::default_templates(), rng,
                                                   cfg.text_max_len - 1)});
  }
  return out;
}

std::vector<training::TrainExample> file_examples(const std::string& path) {
  require_file(path, "dataset");
  std::ifstream is(path);
  const auto samples = training::read_task_samples(is);
  std::vector<training::TrainExample> out;
  const fs::path base = fs::path(path).parent_path();
  for (const auto& s : samples) {
    const fs::path img = fs::path(s.image).is_absolute() ? fs::path(s.image) : base / s.image;
    require_file(img.string(), "image");
    out.push_back({imgbackbone::load_image(img), s});
  }
  return out;
}

json ap_json(const training::ApResult& ap) {
  json per = json::array();
  for (const auto& v : ap.per_label) per.push_back(v ? json(*v) : json(nullptr));
  return {{"mean", ap.mean}, {"per_label", per}};
}

}  // namespace

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&]() -> int {
    if (args.out.empty()) throw ArgumentError("--out is required");
    ModelConfig cfg;
    if (!args.config.empty()) {
      require_file(args.config, "config");
      cfg = load_model_config(args.config);
    }
    const std::uint64_t seed = args.seed ? *args.seed : cfg.seed;
    const auto arch = cfg.arch();
    ParamStore<float> store;
    model::init_model(store, seed, arch);
    textenc::apply_text_freeze(store, arch.text);

    const bool synthetic = args.dataset == "synthetic";
    const auto data = synthetic ? synthetic_examples(cfg, seed, 0, cfg.train_scenes)
                                : file_examples(args.dataset);
    if (data.empty() && args.steps > 0) throw ArgumentError("dataset is empty");

    const std::string metrics_path = args.metrics.empty() ? args.out + ".metrics.jsonl" : args.metrics;
    std::ofstream metrics(metrics_path, std::ios::binary);
    if (!metrics) throw FormatError("cannot write metrics to '" + metrics_path + "'");

    const auto tcfg = cfg.train_config(args.steps, seed);
    training::LossBreakdown window;
    std::size_t in_window = 0;
    try {
      training::train(store, arch, data, tcfg, [&](const training::StepLog& s) {
        window += s.loss;
        ++in_window;
        if ((s.step + 1) % cfg.log_every == 0 || s.step + 1 == args.steps) {
          metrics << breakdown_json(s.step + 1, s.lr, window.scaled(1.0 / in_window)).dump() << "\n";
          metrics.flush();
          window = {};
          in_window = 0;
        }
      });
    } catch (const NumericError& e) {
      training::save_checkpoint(fs::path(args.out), store);
      err << "error: " << e.what() << "; last good checkpoint kept at " << args.out << "\n";
      return kExitNumeric;
    }
    training::save_checkpoint(fs::path(args.out), store);

    if (args.eval) {
      auto ap_of = [&](const std::vector<training::TrainExample>& set) {
        std::vector<training::GroundTruth> gts;
        for (const auto& e : set) gts.push_back(e.sample.gt);
        const std::size_t k = set.empty() ? 0 : set.front().sample.labels.size();
        return training::evaluate_ap(training::predict(store, arch, set), gts, k);
      };
      json ev = {{"ap@0.5", ap_of(data).mean}, {"train", ap_json(ap_of(data))}};
      if (synthetic && cfg.eval_scenes > 0) {
        const auto held = synthetic_examples(cfg, seed, cfg.train_scenes, cfg.eval_scenes);
        const auto ap = ap_of(held);
        ev["heldout_ap@0.5"] = ap.mean;
        ev["heldout"] = ap_json(ap);
      }
      metrics << json{{"eval", ev}}.dump() << "\n";
      out << "ap@0.5 " << ev["ap@0.5"].get<double>();
      if (ev.contains("heldout_ap@0.5")) out << " heldout " << ev["heldout_ap@0.5"].get<double>();
      out << "\n";
    }
    out << "wrote " << args.out << " and " << metrics_path << "\n";
    return kExitOk;
  });
}

int cmd_bench(const BenchArgs& args, std::ostream& out, std::ostream& err, ModuleTimings* result) {
  return guarded(err, [&] {
    if (args.iters < 1) throw ArgumentError("--iters must be >= 1");
    if (args.out.empty()) throw ArgumentError("--out is required");
    if (args.format != "json" && args.format != "csv") {
      throw ArgumentError("--format must be json or csv");
    }
    const auto paths = list_images(args.image_dir);
    if (paths.empty()) throw ArgumentError("no .ppm or .tnsr images in '" + args.image_dir + "'");
    std::vector<TensorF> images;
    for (const auto& p : paths) images.push_back(imgbackbone::load_image(p));

    LoadedModel m = load_model(args.config, args.checkpoint);
    std::vector<std::string> labels;
    if (args.labels.empty()) {
      for (const auto& c : training::default_vocabulary()) labels.push_back(c.name());
    } else {
      labels = split_labels(args.labels);
    }
    const std::string prompt =
        args.prompt ? *args.prompt : default_prompt(labels, m.config.text_max_len - 1);
    if (trim(prompt).empty()) throw ArgumentError("prompt is empty");

    const model::Detector detector(m.config.arch(), std::move(m.params));
    textenc::LanguageCache<float> cache;
    if (args.cache) detector.warm_cache(labels, prompt, cache);
    std::vector<model::StageTimes> runs;
    for (std::size_t i = 0; i < args.warmup + args.iters; ++i) {
      model::StageTimes t;
      detector.detect(images[i % images.size()], labels, prompt, args.cache ? &cache : nullptr, &t);
      if (i >= args.warmup) runs.push_back(t);
    }
    const ModuleTimings timings = summarize(runs, args.cache, args.warmup);
    emit_report(timings, args.format, args.out);
    out << render_table(timings);
    out << "fps " << timings.fps() << " (cache " << (args.cache ? "on" : "off") << ")\n";
    if (result) *result = timings;
    return kExitOk;
  });
}

}  // namespace efh::bench_cli
