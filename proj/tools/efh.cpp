#include <CLI11.hpp>

#include <iostream>

#include "efh/bench_cli/commands.hpp"

using namespace efh::bench_cli;

namespace {

bool parse_switch(const std::string& v) { return v == "on"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-vocabulary detector: detect, train and benchmark"};
  app.require_subcommand(1);

  DetectArgs detect;
  std::string detect_cache = "on";
  std::string detect_prompt;
  auto* d = app.add_subcommand("detect", "Run detection and write one JSON file per image");
  d->add_option("--config", detect.config, "ModelConfig JSON");
  d->add_option("--checkpoint", detect.checkpoint, "OTCK checkpoint");
  d->add_option("--image", detect.images, "Input image (.ppm or .tnsr), repeatable");
  d->add_option("--images", detect.image_dir, "Directory of input images");
  d->add_option("--labels", detect.labels, "Comma-separated labels")->required();
  auto* dp = d->add_option("--prompt", detect_prompt, "Prompt text");
  d->add_option("--cache", detect_cache, "Language cache")->check(CLI::IsMember({"on", "off"}));
  d->add_option("--out", detect.out, "Output file (one image) or directory")->required();

  TrainArgs train;
  std::uint64_t train_seed = 0;
  auto* t = app.add_subcommand("train", "Train and write a checkpoint plus metrics");
  t->add_option("--config", train.config, "ModelConfig JSON");
  t->add_option("--steps", train.steps, "Optimizer steps")->required();
  auto* ts = t->add_option("--seed", train_seed, "Seed (default: config seed)");
  t->add_option("--data", train.dataset, "\"synthetic\" or a TaskSample JSON-lines file");
  t->add_option("--out", train.out, "Checkpoint path")->required();
  t->add_option("--metrics", train.metrics, "Metrics JSON-lines path");
  t->add_flag("--eval", train.eval, "Evaluate AP@0.5 after training");

  BenchArgs bench;
  std::string bench_cache = "on";
  std::string bench_prompt;
  auto* b = app.add_subcommand("bench", "Time the four inference stages at batch size 1");
  b->add_option("--config", bench.config, "ModelConfig JSON");
  b->add_option("--checkpoint", bench.checkpoint, "OTCK checkpoint");
  b->add_option("--images", bench.image_dir, "Directory of input images")->required();
  b->add_option("--iters", bench.iters, "Timed iterations");
  b->add_option("--warmup", bench.warmup, "Untimed warm-up iterations");
  b->add_option("--cache", bench_cache, "Language cache")->check(CLI::IsMember({"on", "off"}));
  b->add_option("--labels", bench.labels, "Comma-separated labels");
  auto* bp = b->add_option("--prompt", bench_prompt, "Prompt text");
  b->add_option("--out", bench.out, "Report path")->required();
  b->add_option("--format", bench.format, "Report format")->check(CLI::IsMember({"json", "csv"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  if (d->parsed()) {
    detect.cache = parse_switch(detect_cache);
    if (dp->count()) detect.prompt = detect_prompt;
    return cmd_detect(detect, std::cout, std::cerr);
  }
  if (t->parsed()) {
    if (ts->count()) train.seed = train_seed;
    return cmd_train(train, std::cout, std::cerr);
  }
  bench.cache = parse_switch(bench_cache);
  if (bp->count()) bench.prompt = bench_prompt;
  return cmd_bench(bench, std::cout, std::cerr);
}
