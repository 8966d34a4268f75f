#pragma once

#include <vector>

#include "efh/imgbackbone/backbone.hpp"
#include "efh/numcore/layers.hpp"

// Language-aware hybrid encoder. Parameters:
//   encoder.aifi.{attn,ln1,ffn,ln2}      intra-scale attention on P5
//   encoder.ccfm.{td0,td1,bu0,bu1}       fusion blocks (c1: 1x1 conv, c3: 3x3 conv)
//   encoder.ccfm.down{0,1}               3x3 stride-2 convs of the bottom-up path
//   encoder.box_mlp.{0,1,2}              per-position box deltas
//   head.label_proj.w                    d_text -> d, shared with classification

namespace efh::ela_encoder {

struct EncoderConfig {
  std::size_t d = 64;
  std::size_t d_text = 64;
  std::size_t heads = 8;
  /// Anchor side at the finest scale; doubles per coarser scale.
  double anchor_size = 0.05;

  void validate() const;
};

/// Flattened multi-scale encoder output O with per-position anchors.
template <typename T>
struct EncodedFeatures {
  Var<T> memory;                         // [M, d]
  std::vector<ops::LevelShape> levels;   // P3, P4, P5 blocks of memory
  Tensor<T> anchors;                     // [M, 4] cxcywh
  std::vector<std::uint8_t> scale;       // scale index per position

  std::size_t size() const { return anchors.empty() ? 0 : anchors.dim(0); }
};

template <typename T>
struct QueryProposals {
  Var<T> boxes;                          // B0 [K_q, 4]
  std::vector<std::size_t> indices;      // rows of O, descending relevance
};

template <typename T>
void init_encoder(ParamStore<T>& store, const Init& init, const EncoderConfig& cfg);

/// Fixed 2D sin-cos encoding [h*w, d] (d divisible by 4).
template <typename T>
Tensor<T> sincos_position_2d(std::size_t h, std::size_t w, std::size_t d);

/// Self-attention + feed-forward over the flattened P5 grid; same shape out.
template <typename T>
Var<T> aifi(DiffContext<T>& ctx, const ParamStore<T>& store, const EncoderConfig& cfg, Var<T> p5,
            bool positional = true);

/// Cross-scale fusion into the flattened encoder output.
template <typename T>
EncodedFeatures<T> ccfm(DiffContext<T>& ctx, const ParamStore<T>& store, const EncoderConfig& cfg,
                        Var<T> p3, Var<T> p4, Var<T> f5);

/// Anchors for the given scale grids, in flattening order.
template <typename T>
Tensor<T> make_anchors(const std::vector<ops::LevelShape>& levels, double anchor_size,
                       std::vector<std::uint8_t>* scale = nullptr);

/// sigmoid(MLP(o_i) + logit(anchor_i)) for every position: [M, 4].
template <typename T>
Var<T> predict_candidate_boxes(DiffContext<T>& ctx, const ParamStore<T>& store,
                               const EncodedFeatures<T>& enc);

/// Label embeddings [K, d_text] mapped to the visual width [K, d].
template <typename T>
Var<T> project_labels(DiffContext<T>& ctx, const ParamStore<T>& store, Var<T> labels);

/// alpha_i = max_j cos(proj(e(l_j)), o_i) with an epsilon guard on the norms.
template <typename T>
Tensor<T> relevance_scores(const Tensor<T>& memory, const Tensor<T>& projected_labels);

/// Top-K positions by relevance; B0 gathers their boxes (gradients pass
/// through to the gathered rows, not to the choice).
template <typename T>
QueryProposals<T> select_queries(DiffContext<T>& ctx, Var<T> boxes, const Tensor<T>& relevance,
                                 std::size_t k);

}  // namespace efh::ela_encoder
