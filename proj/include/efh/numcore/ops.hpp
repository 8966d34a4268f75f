#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "efh/numcore/autodiff.hpp"
#include "efh/numcore/mask.hpp"
#include "efh/numcore/tensor.hpp"

// Differentiable operations over DiffContext values. Each op computes its
// forward value eagerly and records a closure for the backward pass.

namespace efh::ops {

// Elementwise arithmetic (operands of identical shape).
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T factor);

/// x[..., d] + b[d]
template <typename T> Var<T> add_row(Var<T> x, Var<T> b);

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
/// x[n, in] * w[in, out] + b[out]; pass an invalid Var for no bias.
template <typename T> Var<T> linear(Var<T> x, Var<T> w, Var<T> b);
template <typename T> Var<T> transpose(Var<T> x);

template <typename T> Var<T> relu(Var<T> x);
/// tanh approximation.
template <typename T> Var<T> gelu(Var<T> x);
template <typename T> Var<T> silu(Var<T> x);
template <typename T> Var<T> sigmoid(Var<T> x);

template <typename T> Var<T> softmax(Var<T> x, std::size_t axis);
/// Normalizes over the last axis.
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));

template <typename T> Var<T> reshape(Var<T> x, Shape shape);
template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
template <typename T> Var<T> slice(Var<T> x, std::size_t axis, std::size_t begin, std::size_t end);
template <typename T> Var<T> gather_rows(Var<T> x, const std::vector<std::size_t>& rows);

template <typename T> Var<T> sum(Var<T> x);
template <typename T> Var<T> mean(Var<T> x);

/// x[H, W, Cin] convolved with w[k*k*Cin, Cout] (rows ordered ky, kx, ci).
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, std::size_t kernel, std::size_t stride,
              std::size_t pad);
/// Nearest-neighbour 2x upsampling of [H, W, C].
template <typename T> Var<T> upsample2x(Var<T> x);

/// Scaled dot-product attention, heads split along the feature axis.
/// q[n, d], k[m, d], v[m, d] -> [n, d]. Blocked entries get weight 0.
/// When `weights_out` is given it receives the post-softmax weights
/// [heads, n, m].
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, const AttentionMask* mask,
                 Tensor<T>* weights_out = nullptr);

/// Bilinear sampling of F[H, W, c] at continuous pixel coordinates
/// points[n, 2] = (x, y). Neighbours outside the grid read as zero.
template <typename T> Var<T> bilinear_sample(Var<T> feature, Var<T> points);

/// Spatial layout of one scale inside a flattened multi-scale map.
struct LevelShape {
  std::size_t height;
  std::size_t width;
  std::size_t start;
};

/// Multi-scale deformable sampling core.
/// value[M, d]; locations[N, heads, L, P, 2] normalized (x, y) in [0,1];
/// weights[N, heads, L, P]. Returns [N, d] where head h occupies columns
/// [h*d/heads, (h+1)*d/heads).
template <typename T>
Var<T> deform_sample(Var<T> value, const std::vector<LevelShape>& levels, Var<T> locations,
                     Var<T> weights, std::size_t heads);

/// Sampling locations around reference boxes:
/// loc = (cx, cy) + offset * (w, h) / 2, offsets[N, heads*L*P*2].
template <typename T>
Var<T> box_sampling_locations(Var<T> refs, Var<T> offsets, std::size_t heads, std::size_t levels,
                              std::size_t points);

/// sigmoid(delta + logit(ref)) evaluated in a form that returns `ref`
/// bit-exactly when delta == 0. Outputs are clamped to [1e-6, 1 - 1e-6].
template <typename T> Var<T> box_refine(Var<T> ref, Var<T> delta);

/// Sum of binary cross-entropy with logits against soft targets.
template <typename T> Var<T> bce_with_logits_sum(Var<T> logits, const Tensor<T>& targets);
/// Sum of |pred - target|.
template <typename T> Var<T> l1_sum(Var<T> pred, const Tensor<T>& target);
/// Sum over rows of (1 - GIoU(pred_i, target_i)), boxes in cxcywh.
template <typename T> Var<T> giou_loss_sum(Var<T> pred, const Tensor<T>& target);

}  // namespace efh::ops
