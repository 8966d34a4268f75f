#pragma once

#include <filesystem>
#include <string>

#include "efh/model/pipeline.hpp"
#include "efh/training/trainer.hpp"

namespace efh::bench_cli {

/// Every knob of a run, serialized as one flat JSON object with nested
/// "weights" and "dn" objects. Absent fields keep their defaults.
struct ModelConfig {
  std::size_t d = 64;
  std::size_t d_text = 64;
  std::size_t heads = 8;
  std::size_t layers = 4;
  std::size_t num_queries = 64;
  std::size_t points = 4;
  std::size_t text_heads = 4;
  std::size_t text_layers = 2;
  std::size_t frozen_text_layers = 1;
  std::size_t text_max_len = 64;
  double anchor_size = 0.05;
  double score_threshold = 0.05;
  std::uint64_t seed = 0;

  training::LossWeights weights;
  training::DnConfig dn;

  double lr = 1e-3;
  std::size_t batch = 2;
  double weight_decay = 1e-4;
  double clip_norm = 0.1;
  std::size_t log_every = 10;

  std::size_t canvas = 64;
  std::size_t train_scenes = 100;
  std::size_t eval_scenes = 50;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  model::ArchConfig arch() const;
  training::TrainConfig train_config(std::size_t steps, std::uint64_t seed) const;
};

/// Throws ConfigError with a field diagnostic on unknown fields, wrong
/// types, or inconsistent values.
ModelConfig parse_model_config(const std::string& json_text);
ModelConfig load_model_config(const std::filesystem::path& path);
std::string to_json(const ModelConfig& cfg);

}  // namespace efh::bench_cli
