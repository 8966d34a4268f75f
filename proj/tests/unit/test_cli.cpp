#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "efh/bench_cli/commands.hpp"
#include "fixtures.hpp"

using namespace efh;
using namespace efh::bench_cli;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"({"d": 16, "d_text": 16, "heads": 2, "layers": 2, "num_queries": 16,
  "points": 2, "text_heads": 2, "text_max_len": 32, "canvas": 32, "train_scenes": 6,
  "eval_scenes": 3, "batch": 1, "log_every": 2, "seed": 4})";

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& body) {
  std::ofstream os(p, std::ios::binary);
  os << body;
}

/// Scratch directory with a tiny config and a few synthetic images.
struct Workspace {
  fs::path root;
  fs::path config;
  fs::path images;

  explicit Workspace(const std::string& name) {
    root = fs::temp_directory_path() / ("efh_cli_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root / "imgs");
    config = root / "tiny.json";
    images = root / "imgs";
    spit(config, kTinyConfig);
    const auto vocab = training::default_vocabulary();
    for (int i = 0; i < 3; ++i) {
      imgbackbone::save_ppm(images / ("s" + std::to_string(i) + ".ppm"),
                            training::generate_synthetic_scene(i, 32, vocab).image);
    }
  }
  ~Workspace() { fs::remove_all(root); }
  std::string path(const std::string& leaf) const { return (root / leaf).string(); }
};

DetectArgs detect_args(const Workspace& w, const std::string& out) {
  DetectArgs a;
  a.config = w.config.string();
  a.images = {(w.images / "s0.ppm").string()};
  a.labels = "red circle, blue square,green square";
  a.out = out;
  return a;
}

}  // namespace

TEST_CASE("arch config consistency") {
  auto a = test::tiny_arch();
  a.validate();
  a.decoder.d = 32;
  CHECK_THROWS_AS(a.validate(), ConfigError);
  a = test::tiny_arch();
  a.text.d_text = 8;
  CHECK_THROWS_AS(a.validate(), ConfigError);
}

TEST_CASE("detector: cache on and off give identical JSON; stage times add up") {
  const auto arch = test::tiny_arch();
  const model::Detector det(arch, test::init_params<float>(arch, 3));
  textenc::LanguageCache<float> cache;
  CounterRng rng(4);
  const auto vocab = training::default_vocabulary();
  for (int trial = 0; trial < 10; ++trial) {
    const auto scene = training::generate_synthetic_scene(rng.next_u64(), 32, vocab);
    std::vector<std::string> labels;
    for (const auto& c : vocab)
      if (rng.bernoulli(0.5)) labels.push_back(c.name());
    if (labels.empty()) labels.push_back("thing");
    const std::string prompt = default_prompt(labels, 31);
    model::StageTimes t;
    const auto on = det.detect(scene.image, labels, prompt, &cache, &t);
    const auto off = det.detect(scene.image, labels, prompt, nullptr);
    CHECK(ela_decoder::detections_json(on) == ela_decoder::detections_json(off));
    for (double v : {t.text_backbone, t.image_backbone, t.encoder_fpn, t.decoder_head}) CHECK(v >= 0.0);
    CHECK(t.text_backbone + t.image_backbone + t.encoder_fpn + t.decoder_head <= t.total + 1e-9);
  }
  CHECK(cache.stats().hits > 0);
}

TEST_CASE("stopwatch overhead around no-op stages is below 0.1 ms") {
  std::vector<double> sums;
  for (int trial = 0; trial < 101; ++trial) {
    Stopwatch w;
    double sum = 0;
    for (int stage = 0; stage < 4; ++stage) {
      [] {}();
      sum += w.lap();
    }
    sums.push_back(sum);
  }
  std::sort(sums.begin(), sums.end());
  CHECK(sums[50] < 0.1);
}

TEST_CASE("model config round trip and field diagnostics") {
  const ModelConfig defaults;
  CHECK(to_json(parse_model_config(to_json(defaults))) == to_json(defaults));
  const ModelConfig tiny = parse_model_config(kTinyConfig);
  CHECK(tiny.d == 16);
  CHECK(tiny.weights.l1 == 5.0);
  CHECK(to_json(parse_model_config(to_json(tiny))) == to_json(tiny));

  ModelConfig odd;
  odd.lr = 0.1 + 0.2;
  odd.dn.box_noise = 1.0 / 3.0;
  const ModelConfig back = parse_model_config(to_json(odd));
  CHECK(back.lr == odd.lr);
  CHECK(back.dn.box_noise == odd.dn.box_noise);

  auto message = [](const std::string& text) {
    try {
      parse_model_config(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(message(R"({"dd": 1})").find("'dd'") != std::string::npos);
  CHECK(message(R"({"d": "big"})").find("'d'") != std::string::npos);
  CHECK(message(R"({"layers": -1})").find("'layers'") != std::string::npos);
  CHECK(message(R"({"d": 60})").find("'heads'") != std::string::npos);
  CHECK(message(R"({"frozen_text_layers": 3})").find("'frozen_text_layers'") != std::string::npos);
  CHECK(message(R"({"weights": {"cls": -1}})").find("'weights.cls'") != std::string::npos);
  CHECK(message(R"({"weights": {"focal": 1}})").find("'weights.focal'") != std::string::npos);
  CHECK(message(R"({"dn": {"box_noise": 1.0}})").find("'dn.box_noise'") != std::string::npos);
  CHECK(message(R"({"canvas": 48})").find("'canvas'") != std::string::npos);
  CHECK(message("[1, 2]") != "no error");
  CHECK(message("{oops") != "no error");
}

TEST_CASE("timing summaries and report formats") {
  std::vector<double> samples;
  for (int i = 1; i <= 20; ++i) samples.push_back(i);
  const TimingStats s = summarize(samples);
  CHECK(s.mean_ms == 10.5);
  CHECK(s.p50_ms == 10.0);
  CHECK(s.p95_ms == 19.0);
  CHECK(s.stderr_ms == doctest::Approx(std::sqrt(35.0) / std::sqrt(20.0)));

  ModuleTimings t;
  t.components = {TimingStats{0.4, 0.4, 0.5, 0.01}, TimingStats{20.0, 19.9, 21.0, 0.1},
                  TimingStats{6.4, 6.3, 7.0, 0.05}, TimingStats{20.1, 20.0, 22.0, 0.2}};
  t.total = TimingStats{46.5, 46.0, 49.0, 0.3};
  t.cache = true;
  t.warmup = 10;
  t.iterations = 100;
  CHECK(render_table(t) ==
        "Text Backbone | Image Backbone | Encoder/FPN | Decoder/Head | Total\n"
        "<1 | 20.0 | 6.4 | 20.1 | 46.5\n");
  CHECK(t.component_sum() == doctest::Approx(46.9));

  const std::string j = to_json(t);
  CHECK(timings_from_json(j) == t);
  CHECK(to_json(timings_from_json(j)) == j);
  const auto parsed = nlohmann::json::parse(j);
  std::vector<std::string> keys;
  for (auto it = parsed["components"].begin(); it != parsed["components"].end(); ++it) keys.push_back(it.key());
  std::sort(keys.begin(), keys.end());
  CHECK(keys == std::vector<std::string>{"decoder_head", "encoder_fpn", "image_backbone", "text_backbone"});
  CHECK(parsed["fps"].get<double>() == doctest::Approx(1000.0 / 46.5));

  const std::string csv = to_csv(t);
  CHECK(csv.rfind("component,mean_ms,p50_ms,p95_ms\n", 0) == 0);
  CHECK(csv.find("\ntext_backbone,0.4,0.4,0.5\n") != std::string::npos);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
  CHECK_THROWS_AS(timings_from_json("{}"), FormatError);
  CHECK_THROWS_AS(emit_report(t, "xml", "/tmp/efh_never.xml"), FormatError);
  CHECK_THROWS_AS(emit_report(t, "json", "/nonexistent_dir/report.json"), FormatError);
}

TEST_CASE("labels and default prompts") {
  CHECK(split_labels(" cat ,dog") == std::vector<std::string>{"cat", "dog"});
  CHECK_THROWS_AS(split_labels(""), ArgumentError);
  CHECK_THROWS_AS(split_labels("cat,,dog"), ArgumentError);
  CHECK(default_prompt({"cat", "dog"}, 63) == "Detect objects in cat, dog");
  CHECK(default_prompt(std::vector<std::string>(20, "elephant"), 63) == training::kFallbackPrompt);
}

TEST_CASE("cmd_detect outputs, cache transparency and exit codes") {
  Workspace w("detect");
  std::stringstream out, err;
  const auto a_on = detect_args(w, w.path("on.json"));
  REQUIRE(cmd_detect(a_on, out, err) == kExitOk);
  auto a_off = detect_args(w, w.path("off.json"));
  a_off.cache = false;
  REQUIRE(cmd_detect(a_off, out, err) == kExitOk);
  CHECK(slurp(w.path("on.json")) == slurp(w.path("off.json")));
  const auto j = nlohmann::json::parse(slurp(w.path("on.json")));
  CHECK(j.contains("detections"));
  CHECK(j["prompt"] == training::kFallbackPrompt);  // the joined labels exceed 31 bytes

  auto dir = detect_args(w, w.path("dets"));
  dir.images.clear();
  dir.image_dir = w.images.string();
  REQUIRE(cmd_detect(dir, out, err) == kExitOk);
  CHECK(fs::exists(w.root / "dets" / "s0.json"));
  CHECK(fs::exists(w.root / "dets" / "s2.json"));
  CHECK(slurp(w.root / "dets" / "s0.json") == slurp(w.path("on.json")));

  auto missing = detect_args(w, w.path("missing.json"));
  missing.checkpoint = w.path("nope.otck");
  CHECK(cmd_detect(missing, out, err) == kExitUsage);
  CHECK_FALSE(fs::exists(w.path("missing.json")));

  auto no_labels = detect_args(w, w.path("x.json"));
  no_labels.labels = "";
  CHECK(cmd_detect(no_labels, out, err) == kExitUsage);
  auto no_prompt = detect_args(w, w.path("x.json"));
  no_prompt.prompt = "  ";
  CHECK(cmd_detect(no_prompt, out, err) == kExitUsage);
  auto no_image = detect_args(w, w.path("x.json"));
  no_image.images = {w.path("absent.ppm")};
  CHECK(cmd_detect(no_image, out, err) == kExitUsage);

  spit(w.root / "bad.json", R"({"d": 16, "heads": 3})");
  auto bad = detect_args(w, w.path("x.json"));
  bad.config = w.path("bad.json");
  std::stringstream diag;
  CHECK(cmd_detect(bad, out, diag) == kExitUsage);
  CHECK(diag.str().find("'heads'") != std::string::npos);
  CHECK_FALSE(fs::exists(w.path("x.json")));
}

TEST_CASE("cmd_train: zero steps, determinism, evaluation and divergence") {
  Workspace w("train");
  std::stringstream out, err;
  TrainArgs zero;
  zero.config = w.config.string();
  zero.steps = 0;
  zero.out = w.path("zero.otck");
  REQUIRE(cmd_train(zero, out, err) == kExitOk);
  CHECK(slurp(w.path("zero.otck.metrics.jsonl")).empty());
  const auto cfg = load_model_config(w.config);
  auto init = test::init_params<float>(cfg.arch(), cfg.seed);
  CHECK(training::load_checkpoint<float>(fs::path(w.path("zero.otck"))) == init);

  TrainArgs run;
  run.config = w.config.string();
  run.steps = 5;
  run.seed = 9;
  run.eval = true;
  run.out = w.path("a.otck");
  REQUIRE(cmd_train(run, out, err) == kExitOk);
  run.out = w.path("b.otck");
  REQUIRE(cmd_train(run, out, err) == kExitOk);
  const std::string log = slurp(w.path("a.otck.metrics.jsonl"));
  CHECK(log == slurp(w.path("b.otck.metrics.jsonl")));
  CHECK(slurp(w.path("a.otck")) == slurp(w.path("b.otck")));
  CHECK(std::count(log.begin(), log.end(), '\n') == 4);  // steps 2, 4, 5 and the evaluation
  CHECK(log.find("\"ap@0.5\"") != std::string::npos);
  CHECK(log.find("\"heldout_ap@0.5\"") != std::string::npos);

  // the trained checkpoint feeds detect
  auto d = detect_args(w, w.path("trained.json"));
  d.checkpoint = w.path("a.otck");
  CHECK(cmd_detect(d, out, err) == kExitOk);

  spit(w.root / "wild.json", R"({"d": 16, "d_text": 16, "heads": 2, "layers": 2, "num_queries": 16,
    "points": 2, "text_heads": 2, "text_max_len": 32, "canvas": 32, "train_scenes": 4,
    "batch": 1, "lr": 1e30, "clip_norm": 0})");
  TrainArgs wild;
  wild.config = w.path("wild.json");
  wild.steps = 20;
  wild.out = w.path("wild.otck");
  std::stringstream diag;
  CHECK(cmd_train(wild, out, diag) == kExitNumeric);
  CHECK(fs::exists(w.path("wild.otck")));
  CHECK(diag.str().find("non-finite") != std::string::npos);
  const auto kept = training::load_checkpoint<float>(fs::path(w.path("wild.otck")));
  for (const auto& [name, e] : kept.entries()) CHECK(e.value.all_finite());
}

TEST_CASE("cmd_train on a task-sample file") {
  Workspace w("jsonl");
  std::vector<training::TaskSample> samples;
  for (int i = 0; i < 3; ++i) {
    auto ex = test::synthetic_example(i, 32, 31);
    ex.sample.image = "imgs/s" + std::to_string(i) + ".ppm";
    samples.push_back(ex.sample);
  }
  std::ofstream os(w.path("data.jsonl"));
  training::write_task_samples(os, samples);
  os.close();
  TrainArgs a;
  a.config = w.config.string();
  a.steps = 2;
  a.dataset = w.path("data.jsonl");
  a.out = w.path("m.otck");
  a.eval = true;
  std::stringstream out, err;
  CHECK(cmd_train(a, out, err) == kExitOk);
  CHECK(slurp(w.path("m.otck.metrics.jsonl")).find("\"ap@0.5\"") != std::string::npos);
  a.dataset = w.path("none.jsonl");
  CHECK(cmd_train(a, out, err) == kExitUsage);
}

TEST_CASE("cmd_bench report contract and exit codes") {
  Workspace w("bench");
  std::stringstream out, err;
  BenchArgs a;
  a.config = w.config.string();
  a.image_dir = w.images.string();
  a.iters = 1;
  a.warmup = 0;
  a.out = w.path("r.json");
  ModuleTimings t;
  REQUIRE(cmd_bench(a, out, err, &t) == kExitOk);
  CHECK(t.iterations == 1);
  CHECK(t.warmup == 0);
  const auto j = nlohmann::json::parse(slurp(w.path("r.json")));
  CHECK(j["iterations"] == 1);
  CHECK(j["warmup"] == 0);
  CHECK(j["components"].size() == 4);
  for (const char* k : kComponents) CHECK(j["components"].contains(k));

  a.iters = 30;
  a.warmup = 3;
  a.format = "csv";
  a.out = w.path("r.csv");
  REQUIRE(cmd_bench(a, out, err, &t) == kExitOk);
  CHECK(slurp(w.path("r.csv")).rfind("component,mean_ms,p50_ms,p95_ms\n", 0) == 0);
  CHECK(std::abs(t.component_sum() - t.total.mean_ms) <= 0.05 * t.total.mean_ms);

  fs::create_directories(w.root / "empty");
  a.image_dir = (w.root / "empty").string();
  CHECK(cmd_bench(a, out, err) == kExitUsage);
  a.image_dir = w.images.string();
  a.iters = 0;
  CHECK(cmd_bench(a, out, err) == kExitUsage);
  a.iters = 2;
  a.out = "/nonexistent_dir/r.json";
  CHECK(cmd_bench(a, out, err) == kExitUsage);
}

TEST_CASE("more iterations keep component means within three standard errors") {
  Workspace w("stable");
  std::stringstream out, err;
  BenchArgs a;
  a.config = w.config.string();
  a.image_dir = w.images.string();
  a.warmup = 5;
  a.cache = false;
  a.out = w.path("s.json");
  ModuleTimings shorter, longer;
  a.iters = 40;
  REQUIRE(cmd_bench(a, out, err, &shorter) == kExitOk);
  a.iters = 120;
  REQUIRE(cmd_bench(a, out, err, &longer) == kExitOk);
  for (std::size_t i = 0; i < 4; ++i) {
    CAPTURE(kComponents[i]);
    const auto& s = shorter.components[i];
    const auto& l = longer.components[i];
    const double se = std::sqrt(s.stderr_ms * s.stderr_ms + l.stderr_ms * l.stderr_ms);
    CHECK(std::abs(s.mean_ms - l.mean_ms) <= 3.0 * se);
  }
}
