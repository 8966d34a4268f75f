#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "efh/numcore/tensor.hpp"

// Plain tensor kernels shared by the differentiable ops and by
// inference-only code paths.

namespace efh::kernels {

/// C (+)= op(A) * op(B) for row-major buffers; op(A) is m x k, op(B) is k x n.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Idx = Eigen::Index;
  Eigen::Map<RowMat> out(c, static_cast<Idx>(m), static_cast<Idx>(n));
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) out.setZero();
    return;
  }
  Eigen::Map<const RowMat> ma(a, static_cast<Idx>(trans_a ? k : m), static_cast<Idx>(trans_a ? m : k));
  Eigen::Map<const RowMat> mb(b, static_cast<Idx>(trans_b ? n : k), static_cast<Idx>(trans_b ? k : n));
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) {
      out.noalias() += lhs * rhs;
    } else {
      out.noalias() = lhs * rhs;
    }
  };
  if (trans_a && trans_b) {
    run(ma.transpose(), mb.transpose());
  } else if (trans_a) {
    run(ma.transpose(), mb);
  } else if (trans_b) {
    run(ma, mb.transpose());
  } else {
    run(ma, mb);
  }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  }
  Tensor<T> out({a.dim(0), b.dim(1)});
  gemm(false, false, a.dim(0), b.dim(1), a.dim(1), a.raw(), b.raw(), out.raw(), false);
  return out;
}

/// Splits a shape around `axis` into (outer, length, inner) extents.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t length = 1;
  std::size_t inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

/// Max-subtracted softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  Tensor<T> out(x.shape());
  const T* in = x.raw();
  T* o = out.raw();
  for (std::size_t a = 0; a < s.outer; ++a) {
    for (std::size_t c = 0; c < s.inner; ++c) {
      const std::size_t base = a * s.length * s.inner + c;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < s.length; ++i) mx = std::max(mx, in[base + i * s.inner]);
      T total = 0;
      for (std::size_t i = 0; i < s.length; ++i) {
        const T e = std::exp(in[base + i * s.inner] - mx);
        o[base + i * s.inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::size_t i = 0; i < s.length; ++i) o[base + i * s.inner] *= inv;
    }
  }
  return out;
}

/// Layer normalization over the last axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: gamma/beta length does not match last axis " +
                         std::to_string(d));
  }
  Tensor<T> out(x.shape());
  const std::size_t rows = d ? x.numel() / d : 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.raw() + r * d;
    T* o = out.raw() + r * d;
    T mu = 0;
    for (std::size_t i = 0; i < d; ++i) mu += in[i];
    mu /= T(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= T(d);
    const T inv = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) o[i] = (in[i] - mu) * inv * gamma[i] + beta[i];
  }
  return out;
}

/// Corner weights of a bilinear sample at pixel coordinates (x, y).
template <typename T>
struct BilinearCorners {
  long x0, y0;
  T fx, fy;
};

template <typename T>
BilinearCorners<T> bilinear_corners(T x, T y) {
  const T xf = std::floor(x);
  const T yf = std::floor(y);
  return {static_cast<long>(xf), static_cast<long>(yf), x - xf, y - yf};
}

/// Adds weight * bilinear(F, x, y)[c0 : c0 + count] into out. F is laid out
/// as rows of `row_stride` values, pixel (ix, iy) at row base + iy*W + ix.
template <typename T>
void bilinear_accumulate(const T* f, std::size_t height, std::size_t width, std::size_t row_stride,
                         std::size_t c0, std::size_t count, T x, T y, T weight, T* out) {
  const auto bc = bilinear_corners(x, y);
  const T w[4] = {(1 - bc.fx) * (1 - bc.fy), bc.fx * (1 - bc.fy), (1 - bc.fx) * bc.fy,
                  bc.fx * bc.fy};
  const long xs[4] = {bc.x0, bc.x0 + 1, bc.x0, bc.x0 + 1};
  const long ys[4] = {bc.y0, bc.y0, bc.y0 + 1, bc.y0 + 1};
  for (int q = 0; q < 4; ++q) {
    if (xs[q] < 0 || ys[q] < 0 || xs[q] >= static_cast<long>(width) ||
        ys[q] >= static_cast<long>(height) || w[q] == T(0)) {
      continue;
    }
    const T* src = f + (static_cast<std::size_t>(ys[q]) * width + static_cast<std::size_t>(xs[q])) *
                           row_stride + c0;
    const T cw = weight * w[q];
    for (std::size_t c = 0; c < count; ++c) out[c] += cw * src[c];
  }
}

template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& feature, const Tensor<T>& points) {
  if (feature.rank() != 3) throw DimensionError("bilinear_sample: feature must be [H, W, c]");
  if (points.rank() != 2 || points.dim(1) != 2) {
    throw DimensionError("bilinear_sample: points must be [n, 2]");
  }
  const std::size_t h = feature.dim(0), w = feature.dim(1), c = feature.dim(2);
  Tensor<T> out({points.dim(0), c});
  for (std::size_t i = 0; i < points.dim(0); ++i) {
    bilinear_accumulate(feature.raw(), h, w, c, 0, c, points.at(i, 0), points.at(i, 1), T(1),
                        out.raw() + i * c);
  }
  return out;
}

/// Indices of the k largest scores in descending order; equal scores are
/// ordered by smaller index first.
template <typename T>
std::vector<std::size_t> top_k(std::span<const T> scores, std::size_t k) {
  if (k > scores.size()) {
    throw ArgumentError("top_k: k=" + std::to_string(k) + " exceeds " +
                        std::to_string(scores.size()) + " scores");
  }
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
  idx.resize(k);
  return idx;
}

}  // namespace efh::kernels
