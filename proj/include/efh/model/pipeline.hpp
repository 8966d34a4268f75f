#pragma once

#include <string>
#include <vector>

#include "efh/ela_decoder/decoder.hpp"
#include "efh/imgbackbone/backbone.hpp"
#include "efh/numcore/stopwatch.hpp"
#include "efh/textenc/text_encoder.hpp"

namespace efh::model {

/// Dimensional layout of the whole detector.
struct ArchConfig {
  textenc::TextConfig text;
  imgbackbone::BackboneConfig backbone;
  ela_encoder::EncoderConfig encoder;
  ela_decoder::DecoderConfig decoder;

  /// Copies the shared widths (d, d_text) from `d` / `d_text` into every
  /// sub-config.
  void sync(std::size_t d, std::size_t d_text);
  void validate() const;
};

template <typename T>
void init_model(ParamStore<T>& store, std::uint64_t seed, const ArchConfig& arch);

/// Everything the image side produces before decoding.
template <typename T>
struct Encoded {
  ela_encoder::EncodedFeatures<T> enc;
  Var<T> candidates;                       // [M, 4]
  Tensor<T> relevance;                     // [M]
  ela_encoder::QueryProposals<T> proposals;
};

template <typename T>
imgbackbone::FeaturePyramid<T> run_backbone(DiffContext<T>& ctx, const ParamStore<T>& store,
                                            const ArchConfig& arch, Var<T> image);

/// AIFI + CCFM + candidate boxes + language-aware top-K.
template <typename T>
Encoded<T> run_encoder(DiffContext<T>& ctx, const ParamStore<T>& store, const ArchConfig& arch,
                       const imgbackbone::FeaturePyramid<T>& pyramid, Var<T> projected_labels);

template <typename T>
struct Forward {
  Encoded<T> encoded;
  Var<T> projected_labels;                 // [K_lbl, d]
  ela_decoder::DecoderOutput<T> decoded;
};

/// Full differentiable pass from pixels and text features.
template <typename T>
Forward<T> forward(DiffContext<T>& ctx, const ParamStore<T>& store, const ArchConfig& arch,
                   Var<T> image, Var<T> label_features, Var<T> prompt_features,
                   const ela_decoder::DnQueries<T>* dn = nullptr);

/// Wall time of the four inference stages, in milliseconds.
struct StageTimes {
  double text_backbone = 0;
  double image_backbone = 0;
  double encoder_fpn = 0;
  double decoder_head = 0;
  double total = 0;
};

/// Single-precision inference with optional language cache.
class Detector {
 public:
  Detector(ArchConfig arch, ParamStore<float> params);

  const ArchConfig& arch() const { return arch_; }
  const ParamStore<float>& params() const { return params_; }

  /// Runs text encoding, backbone, encoder and decoder on one image.
  /// `times`, when given, receives the per-stage wall times.
  ela_decoder::DetectionSet detect(const TensorF& image, const std::vector<std::string>& labels,
                                   const std::string& prompt,
                                   textenc::LanguageCache<float>* cache = nullptr,
                                   StageTimes* times = nullptr) const;

  /// Pre-computes text embeddings into `cache`.
  void warm_cache(const std::vector<std::string>& labels, const std::string& prompt,
                  textenc::LanguageCache<float>& cache) const;

 private:
  ArchConfig arch_;
  ParamStore<float> params_;
};

}  // namespace efh::model
