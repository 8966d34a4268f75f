#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "efh/ela_encoder/encoder.hpp"

// Language-aware decoder. Parameters:
//   decoder.query_embed [K_q, d]           learned content queries Q0
//   decoder.prompt_proj                    d_text -> d for prompt features
//   decoder.dn_content                     d_text -> d for denoising queries
//   decoder.qpos.{0,1}                     box -> query positional embedding
//   decoder.layer<l>.self_attn, ln_q, ln_p
//   decoder.layer<l>.deform.{offsets,weights,value,out}, ln_cross
//   decoder.layer<l>.ffn.{0,1}, ln_ffn
//   decoder.layer<l>.box_mlp.{0,1,2}

namespace efh::ela_decoder {

struct DecoderConfig {
  std::size_t d = 64;
  std::size_t d_text = 64;
  std::size_t heads = 8;
  std::size_t points = 4;
  std::size_t levels = 3;
  std::size_t layers = 4;
  std::size_t num_queries = 64;
  double score_threshold = 0.05;

  void validate() const;
};

template <typename T>
struct QueryState {
  Var<T> q;      // [N_q, d]
  Var<T> p;      // [T, d]
  Var<T> boxes;  // [N_q, 4]
};

/// Training-time denoising queries, laid out as `groups` blocks of
/// `per_group` rows in front of the matching queries.
template <typename T>
struct DnQueries {
  Var<T> content;  // [groups*per_group, d]
  Tensor<T> boxes;  // [groups*per_group, 4]
  std::size_t groups = 0;
  std::size_t per_group = 0;

  std::size_t count() const { return groups * per_group; }
};

template <typename T>
struct LayerRecord {
  Var<T> boxes;   // [N_q, 4] after refinement
  Var<T> logits;  // [N_q, K_lbl]
};

template <typename T>
struct DecoderOutput {
  std::vector<LayerRecord<T>> layers;
  std::size_t dn_count = 0;  // leading rows that belong to denoising queries
};

template <typename T>
void init_decoder(ParamStore<T>& store, const Init& init, const DecoderConfig& cfg);

/// Rows laid out as [dn (groups*per_group) | matching (k_q) | prompt (t)].
AttentionMask build_dn_mask(std::size_t k_q, std::size_t groups, std::size_t per_group,
                            std::size_t t);

/// Deformable cross-attention of `query` [N, d] into the encoder output,
/// sampling around `refs` [N, 4].
template <typename T>
Var<T> deformable_attention(DiffContext<T>& ctx, const ParamStore<T>& store,
                            const std::string& prefix, const DecoderConfig& cfg, Var<T> query,
                            Var<T> refs, const ela_encoder::EncodedFeatures<T>& enc);

/// One decoder layer. `refs_detached` stops gradients into the incoming
/// boxes through the refinement.
template <typename T>
QueryState<T> decoder_layer(DiffContext<T>& ctx, const ParamStore<T>& store,
                            const DecoderConfig& cfg, std::size_t layer, const QueryState<T>& in,
                            const ela_encoder::EncodedFeatures<T>& enc, const AttentionMask& mask,
                            bool refs_detached);

/// logits[i][j] = <q_i, proj(e(l_j))> / sqrt(d).
template <typename T>
Var<T> classify(Var<T> queries, Var<T> projected_labels);

/// Runs every layer starting from Q0, B0 = `proposals` and P0 = the
/// projected prompt features.
template <typename T>
DecoderOutput<T> run_decoder(DiffContext<T>& ctx, const ParamStore<T>& store,
                             const DecoderConfig& cfg, Var<T> proposals, Var<T> prompt_features,
                             Var<T> projected_labels, const ela_encoder::EncodedFeatures<T>& enc,
                             const DnQueries<T>* dn = nullptr);

struct Detection {
  std::array<double, 4> box{};  // cxcywh, normalized
  std::size_t label = 0;
  double score = 0.0;
  std::size_t query = 0;
};

struct DetectionSet {
  std::string image;
  std::string prompt;
  std::vector<std::string> labels;
  std::vector<Detection> detections;  // descending score
};

/// Final-layer detections of the matching queries: argmax label, sigmoid
/// score, kept when score >= threshold.
template <typename T>
DetectionSet collect_detections(const DecoderOutput<T>& out, double threshold);

/// `{"image": .., "prompt": .., "detections": [{"bbox": [..], "score": s,
/// "label": ".."}]}` with six fixed decimals.
std::string detections_json(const DetectionSet& set);

}  // namespace efh::ela_decoder
