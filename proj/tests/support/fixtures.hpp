#pragma once

#include "efh/model/pipeline.hpp"
#include "efh/training/trainer.hpp"

namespace efh::test {

/// Small enough for finite differences and quick training loops.
inline model::ArchConfig tiny_arch() {
  model::ArchConfig a;
  a.sync(16, 16);
  a.text.heads = 2;
  a.text.layers = 2;
  a.text.frozen_layers = 1;
  a.text.max_len = 32;
  a.encoder.heads = 2;
  a.decoder.heads = 2;
  a.decoder.points = 2;
  a.decoder.layers = 2;
  a.decoder.num_queries = 16;
  return a;
}

template <typename T>
ParamStore<T> init_params(const model::ArchConfig& arch, std::uint64_t seed) {
  ParamStore<T> store;
  model::init_model(store, seed, arch);
  textenc::apply_text_freeze(store, arch.text);
  return store;
}

/// Synthetic scene converted to an OD sample.
inline training::TrainExample synthetic_example(std::uint64_t seed, std::size_t canvas,
                                                std::size_t max_chars) {
  const auto scene = training::generate_synthetic_scene(seed, canvas, training::default_vocabulary());
  training::RawAnnotation raw;
  raw.image = scene.gt.image;
  raw.labels = scene.labels;
  raw.boxes = scene.gt.boxes;
  raw.label_ids = scene.gt.labels;
  CounterRng rng(seed, 1);
  return {scene.image, training::convert_task(raw, "OD", training::default_templates(), rng, max_chars)};
}

}  // namespace efh::test
