#include "efh/numcore/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>

#include "efh/numcore/box.hpp"
#include "efh/numcore/kernels.hpp"

namespace efh::ops {
namespace {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

template <typename T>
DiffContext<T>& ctx_of(const Var<T>& v) {
  return *v.ctx;
}

// y = f(x) elementwise with dy/dx = df(x, y).
template <typename T, typename F, typename DF>
Var<T> unary(Var<T> x, F f, DF df, const char* op) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = f(xv[i]);
  return ctx_of(x).record(
      std::move(out), {x},
      [x, df](DiffContext<T>& c, std::uint32_t self) {
        const Tensor<T>& g = c.upstream(self);
        const Tensor<T>& xv = c.value(x);
        const Tensor<T>& yv = c.value(Var<T>{&c, self});
        Tensor<T>& gx = c.accumulate_into(x);
        for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
      },
      op);
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "add");
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
  return ctx_of(a).record(
      std::move(out), {a, b},
      [a, b](DiffContext<T>& c, std::uint32_t self) {
        const Tensor<T>& g = c.upstream(self);
        for (Var<T> p : {a, b}) {
          if (!c.needs_grad(p)) continue;
          Tensor<T>& gp = c.accumulate_into(p);
          for (std::size_t i = 0; i < g.numel(); ++i) gp[i] += g[i];
        }
      },
      "add");
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "sub");
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] - bv[i];
  return ctx_of(a).record(
      std::move(out), {a, b},
      [a, b](DiffContext<T>& c, std::uint32_t self) {
        const Tensor<T>& g = c.upstream(self);
        if (c.needs_grad(a)) {
          Tensor<T>& ga = c.accumulate_into(a);
          for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (c.needs_grad(b)) {
          Tensor<T>& gb = c.accumulate_into(b);
          for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
        }
      },
      "sub");
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "mul");
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  return ctx_of(a).record(
      std::move(out), {a, b},
      [a, b](DiffContext<T>& c, std::uint32_t self) {
        const Tensor<T>& g = c.upstream(self);
        const Tensor<T>& av = c.value(a);
        const Tensor<T>& bv = c.value(b);
        if (c.needs_grad(a)) {
          Tensor<T>& ga = c.accumulate_into(a);
          for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
        }
        if (c.needs_grad(b)) {
          Tensor<T>& gb = c.accumulate_into(b);
          for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
        }
      },
      "mul");
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  return unary(
      a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; }, "scale");
}

template <typename T>
Var<T> add_row(Var<T> x, Var<T> b) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& bv = b.value();
  const std::size_t d = bv.numel();
  if (xv.rank() == 0 || xv.shape().back() != d) {
    throw DimensionError("add_row: bias length " + std::to_string(d) + " does not match " +
                         shape_str(xv.shape()));
  }
  Tensor<T> out(xv.shape());
  const std::size_t rows = d ? xv.numel() / d : 0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] + bv[j];
  }
  return ctx_of(x).record(
      std::move(out), {x, b},
      [x, b, rows, d](DiffContext<T>& c, std::uint32_t self) {
        const Tensor<T>& g = c.upstream(self);
        if (c.needs_grad(x)) {
          Tensor<T>& gx = c.accumulate_into(x);
          for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
        }
        if (c.needs_grad(b)) {
          Tensor<T>& gb = c.accumulate_into(b);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
          }
        }
      },
      "add_row");
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tensor<T> out = kernels::matmul(a.value(), b.value());
  return ctx_of(a).record(
      std::move(out), {a, b},
      [a, b](DiffContext<T>& c, std::uint32_t self) {
        const Tensor<T>& g = c.upstream(self);
        const Tensor<T>& av = c.value(a);
        const Tensor<T>& bv = c.value(b);
        const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
        if (c.needs_grad(a)) {
          kernels::gemm(false, true, m, k, n, g.raw(), bv.raw(), c.accumulate_into(a).raw(), true);
        }
        if (c.needs_grad(b)) {
          kernels::gemm(true, false, k, n, m, av.raw(), g.raw(), c.accumulate_into(b).raw(), true);
        }
      },
      "matmul");
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(0)) {
    throw DimensionError("linear: input " + shape_str(xv.shape()) + " vs weight " +
                         shape_str(wv.shape()));
  }
  const std::size_t n = xv.dim(0), in = xv.dim(1), out_dim = wv.dim(1);
  Tensor<T> out({n, out_dim});
  if (b.valid()) {
    const Tensor<T>& bv = b.value();
    if (bv.numel() != out_dim) throw DimensionError("linear: bias length mismatch");
    for (std::size_t r = 0; r < n; ++r) {
      std::copy(bv.raw(), bv.raw() + out_dim, out.raw() + r * out_dim);
    }
  }
  kernels::gemm(false, false, n, out_dim, in, xv.raw(), wv.raw(), out.raw(), b.valid());
  std::vector<Var<T>> parents{x, w};
  if (b.valid()) parents.push_back(b);
  return ctx_of(x).record(
      std::move(out), parents,
      [x, w, b, n, in, out_dim](DiffContext<T>& c, std::uint32_t self) {
        const Tensor<T>& g = c.upstream(self);
        if (c.needs_grad(x)) {
          kernels::gemm(false, true, n, in, out_dim, g.raw(), c.value(w).raw(),
                        c.accumulate_into(x).raw(), true);
        }
        if (c.needs_grad(w)) {
          kernels::gemm(true, false, in, out_dim, n, c.value(x).raw(), g.raw(),
                        c.accumulate_into(w).raw(), true);
        }
        if (b.valid() && c.needs_grad(b)) {
          Tensor<T>& gb = c.accumulate_into(b);
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[r * out_dim + j];
          }
        }
      },
      "linear");
}

template <typename T>
Var<T> transpose(Var<T> x) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 2) throw DimensionError("transpose: expects a matrix");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
  }
  return ctx_of(x).record(
      std::move(out), {x},
      [x, m, n](DiffContext<T>& c, std::uint32_t self) {
        const Tensor<T>& g = c.upstream(self);
        Tensor<T>& gx = c.accumulate_into(x);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
        }
      },
      "transpose");
}

template <typename T>
Var<T> relu(Var<T> x) {
  return unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); },
      "relu");
}

template <typename T>
Var<T> gelu(Var<T> x) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T a = T(0.044715);
  return unary(
      x,
      [](T v) { return T(0.5) * v * (T(1) + std::tanh(k * (v + a * v * v * v))); },
      [](T v, T) {
        const T u = k * (v + a * v * v * v);
        const T t = std::tanh(u);
        const T du = k * (T(1) + T(3) * a * v * v);
        return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du;
      },
      "gelu");
}

template <typename T>
Var<T> silu(Var<T> x) {
  return unary(
      x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      },
      "silu");
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return unary(
      x,
      [](T v) {
        if (v >= 0) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); }, "sigmoid");
}

template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  Tensor<T> out = kernels::softmax(x.value(), axis);
  const kernels::AxisSplit s = kernels::split_axis(x.shape(), axis);
  return ctx_of(x).record(
      std::move(out), {x},
      [x, s](DiffContext<T>& c, std::uint32_t self) {
        const Tensor<T>& g = c.upstream(self);
        const Tensor<T>& y = c.value(Var<T>{&c, self});
        Tensor<T>& gx = c.accumulate_into(x);
        for (std::size_t a = 0; a < s.outer; ++a) {
          for (std::size_t ci = 0; ci < s.inner; ++ci) {
            const std::size_t base = a * s.length * s.inner + ci;
            T dot = 0;
            for (std::size_t i = 0; i < s.length; ++i) {
              dot += g[base + i * s.inner] * y[base + i * s.inner];
            }
            for (std::size_t i = 0; i < s.length; ++i) {
              const std::size_t p = base + i * s.inner;
              gx[p] += y[p] * (g[p] - dot);
            }
          }
        }
      },
      "softmax");
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  Tensor<T> out = kernels::layer_norm(x.value(), gamma.value(), beta.value(), eps);
  return ctx_of(x).record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, eps](DiffContext<T>& c, std::uint32_t self) {
        const Tensor<T>& g = c.upstream(self);
        const Tensor<T>& xv = c.value(x);
        const Tensor<T>& gm = c.value(gamma);
        const std::size_t d = xv.shape().back();
        const std::size_t rows = d ? xv.numel() / d : 0;
        Tensor<T>* gx = c.needs_grad(x) ? &c.accumulate_into(x) : nullptr;
        Tensor<T>* gg = c.needs_grad(gamma) ? &c.accumulate_into(gamma) : nullptr;
        Tensor<T>* gb = c.needs_grad(beta) ? &c.accumulate_into(beta) : nullptr;
        std::vector<T> xhat(d), gh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* in = xv.raw() + r * d;
          const T* go = g.raw() + r * d;
          T mu = 0;
          for (std::size_t i = 0; i < d; ++i) mu += in[i];
          mu /= T(d);
          T var = 0;
          for (std::size_t i = 0; i < d; ++i) var += (in[i] - mu) * (in[i] - mu);
          var /= T(d);
          const T inv = T(1) / std::sqrt(var + eps);
          T sum_gh = 0, sum_gh_xhat = 0;
          for (std::size_t i = 0; i < d; ++i) {
            xhat[i] = (in[i] - mu) * inv;
            gh[i] = go[i] * gm[i];
            sum_gh += gh[i];
            sum_gh_xhat += gh[i] * xhat[i];
            if (gg) (*gg)[i] += go[i] * xhat[i];
            if (gb) (*gb)[i] += go[i];
          }
          if (gx) {
            T* dst = gx->raw() + r * d;
            for (std::size_t i = 0; i < d; ++i) {
              dst[i] += inv * (gh[i] - sum_gh / T(d) - xhat[i] * sum_gh_xhat / T(d));
            }
          }
        }
      },
      "layer_norm");
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return ctx_of(x).record(
      std::move(out), {x},
      [x](DiffContext<T>& c, std::uint32_t self) {
        const Tensor<T>& g = c.upstream(self);
        Tensor<T>& gx = c.accumulate_into(x);
        for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
      },
      "reshape");
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ArgumentError("concat: no inputs");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw DimensionError("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != shape.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != shape[i]) {
        throw DimensionError("concat: " + shape_str(s) + " vs " + shape_str(shape));
      }
    }
    total += s[axis];
  }
  shape[axis] = total;
  Tensor<T> out(shape);
  const auto split = kernels::split_axis(shape, axis);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.shape()[axis];
    const Tensor<T>& v = p.value();
    for (std::size_t a = 0; a < split.outer; ++a) {
      std::copy(v.raw() + a * len * split.inner, v.raw() + (a + 1) * len * split.inner,
                out.raw() + (a * total + offset) * split.inner);
    }
    offset += len;
  }
  return ctx_of(parts[0]).record(
      std::move(out), parts,
      [parts, offsets, split, total, axis](DiffContext<T>& c, std::uint32_t self) {
        const Tensor<T>& g = c.upstream(self);
        for (std::size_t pi = 0; pi < parts.size(); ++pi) {
          if (!c.needs_grad(parts[pi])) continue;
          const std::size_t len = c.value(parts[pi]).shape()[axis];
          Tensor<T>& gp = c.accumulate_into(parts[pi]);
          for (std::size_t a = 0; a < split.outer; ++a) {
            const T* src = g.raw() + (a * total + offsets[pi]) * split.inner;
            T* dst = gp.raw() + a * len * split.inner;
            for (std::size_t i = 0; i < len * split.inner; ++i) dst[i] += src[i];
          }
        }
      },
      "concat");
}

template <typename T>
Var<T> slice(Var<T> x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor<T>& xv = x.value();
  const auto split = kernels::split_axis(xv.shape(), axis);
  if (begin > end || end > split.length) throw DimensionError("slice: range out of bounds");
  Shape shape = xv.shape();
  shape[axis] = end - begin;
  Tensor<T> out(shape);
  const std::size_t len = end - begin;
  for (std::size_t a = 0; a < split.outer; ++a) {
    std::copy(xv.raw() + (a * split.length + begin) * split.inner,
              xv.raw() + (a * split.length + end) * split.inner,
              out.raw() + a * len * split.inner);
  }
  return ctx_of(x).record(
      std::move(out), {x},
      [x, split, begin, len](DiffContext<T>& c, std::uint32_t self) {
        const Tensor<T>& g = c.upstream(self);
        Tensor<T>& gx = c.accumulate_into(x);
        for (std::size_t a = 0; a < split.outer; ++a) {
          const T* src = g.raw() + a * len * split.inner;
          T* dst = gx.raw() + (a * split.length + begin) * split.inner;
          for (std::size_t i = 0; i < len * split.inner; ++i) dst[i] += src[i];
        }
      },
      "slice");
}

template <typename T>
Var<T> gather_rows(Var<T> x, const std::vector<std::size_t>& rows) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() == 0) throw DimensionError("gather_rows: scalar input");
  const std::size_t stride = xv.dim(0) ? xv.numel() / xv.dim(0) : 0;
  Shape shape = xv.shape();
  shape[0] = rows.size();
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= xv.dim(0)) throw DimensionError("gather_rows: index out of range");
    std::copy(xv.raw() + rows[i] * stride, xv.raw() + (rows[i] + 1) * stride,
              out.raw() + i * stride);
  }
  return ctx_of(x).record(
      std::move(out), {x},
      [x, rows, stride](DiffContext<T>& c, std::uint32_t self) {
        const Tensor<T>& g = c.upstream(self);
        Tensor<T>& gx = c.accumulate_into(x);
        for (std::size_t i = 0; i < rows.size(); ++i) {
          for (std::size_t j = 0; j < stride; ++j) gx[rows[i] * stride + j] += g[i * stride + j];
        }
      },
      "gather_rows");
}

template <typename T>
Var<T> sum(Var<T> x) {
  const Tensor<T>& xv = x.value();
  T total = 0;
  for (T v : xv.data()) total += v;
  return ctx_of(x).record(
      Tensor<T>::scalar(total), {x},
      [x](DiffContext<T>& c, std::uint32_t self) {
        const T g = c.upstream(self)[0];
        Tensor<T>& gx = c.accumulate_into(x);
        for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += g;
      },
      "sum");
}

template <typename T>
Var<T> mean(Var<T> x) {
  const std::size_t n = x.value().numel();
  return scale(sum(x), n ? T(1) / T(n) : T(0));
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, std::size_t kernel, std::size_t stride,
              std::size_t pad) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  if (xv.rank() != 3) throw DimensionError("conv2d: input must be [H, W, C]");
  const std::size_t h = xv.dim(0), wd = xv.dim(1), cin = xv.dim(2);
  const std::size_t patch = kernel * kernel * cin;
  if (wv.rank() != 2 || wv.dim(0) != patch) {
    throw DimensionError("conv2d: weight " + shape_str(wv.shape()) + " does not fit kernel " +
                         std::to_string(kernel) + " with " + std::to_string(cin) + " channels");
  }
  if (h + 2 * pad < kernel || wd + 2 * pad < kernel) throw DimensionError("conv2d: input too small");
  const std::size_t cout = wv.dim(1);
  const std::size_t ho = (h + 2 * pad - kernel) / stride + 1;
  const std::size_t wo = (wd + 2 * pad - kernel) / stride + 1;
  auto cols = std::make_shared<std::vector<T>>(ho * wo * patch, T(0));
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      T* row = cols->data() + (oy * wo + ox) * patch;
      for (std::size_t ky = 0; ky < kernel; ++ky) {
        const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
        if (iy < 0 || iy >= static_cast<long>(h)) continue;
        for (std::size_t kx = 0; kx < kernel; ++kx) {
          const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
          if (ix < 0 || ix >= static_cast<long>(wd)) continue;
          const T* src = xv.raw() + (static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix)) * cin;
          std::copy(src, src + cin, row + (ky * kernel + kx) * cin);
        }
      }
    }
  }
  Tensor<T> out({ho, wo, cout});
  if (b.valid()) {
    const Tensor<T>& bv = b.value();
    if (bv.numel() != cout) throw DimensionError("conv2d: bias length mismatch");
    for (std::size_t p = 0; p < ho * wo; ++p) std::copy(bv.raw(), bv.raw() + cout, out.raw() + p * cout);
  }
  kernels::gemm(false, false, ho * wo, cout, patch, cols->data(), wv.raw(), out.raw(), b.valid());
  std::vector<Var<T>> parents{x, w};
  if (b.valid()) parents.push_back(b);
  return ctx_of(x).record(
      std::move(out), parents,
      [x, w, b, cols, h, wd, cin, cout, ho, wo, patch, kernel, stride, pad](DiffContext<T>& c,
                                                                              std::uint32_t self) {
        const Tensor<T>& g = c.upstream(self);
        const std::size_t npos = ho * wo;
        if (c.needs_grad(w)) {
          kernels::gemm(true, false, patch, cout, npos, cols->data(), g.raw(),
                        c.accumulate_into(w).raw(), true);
        }
        if (b.valid() && c.needs_grad(b)) {
          Tensor<T>& gb = c.accumulate_into(b);
          for (std::size_t p = 0; p < npos; ++p) {
            for (std::size_t j = 0; j < cout; ++j) gb[j] += g[p * cout + j];
          }
        }
        if (c.needs_grad(x)) {
          std::vector<T> gcols(npos * patch, T(0));
          kernels::gemm(false, true, npos, patch, cout, g.raw(), c.value(w).raw(), gcols.data(), false);
          Tensor<T>& gx = c.accumulate_into(x);
          for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const T* row = gcols.data() + (oy * wo + ox) * patch;
              for (std::size_t ky = 0; ky < kernel; ++ky) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                if (iy < 0 || iy >= static_cast<long>(h)) continue;
                for (std::size_t kx = 0; kx < kernel; ++kx) {
                  const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                  if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                  T* dst = gx.raw() + (static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix)) * cin;
                  const T* src = row + (ky * kernel + kx) * cin;
                  for (std::size_t ci = 0; ci < cin; ++ci) dst[ci] += src[ci];
                }
              }
            }
          }
        }
      },
      "conv2d");
}

template <typename T>
Var<T> upsample2x(Var<T> x) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 3) throw DimensionError("upsample2x: input must be [H, W, C]");
  const std::size_t h = xv.dim(0), w = xv.dim(1), ch = xv.dim(2);
  Tensor<T> out({2 * h, 2 * w, ch});
  for (std::size_t y = 0; y < 2 * h; ++y) {
    for (std::size_t xx = 0; xx < 2 * w; ++xx) {
      const T* src = xv.raw() + ((y / 2) * w + xx / 2) * ch;
      std::copy(src, src + ch, out.raw() + (y * 2 * w + xx) * ch);
    }
  }
  return ctx_of(x).record(
      std::move(out), {x},
      [x, h, w, ch](DiffContext<T>& c, std::uint32_t self) {
        const Tensor<T>& g = c.upstream(self);
        Tensor<T>& gx = c.accumulate_into(x);
        for (std::size_t y = 0; y < 2 * h; ++y) {
          for (std::size_t xx = 0; xx < 2 * w; ++xx) {
            const T* src = g.raw() + (y * 2 * w + xx) * ch;
            T* dst = gx.raw() + ((y / 2) * w + xx / 2) * ch;
            for (std::size_t k = 0; k < ch; ++k) dst[k] += src[k];
          }
        }
      },
      "upsample2x");
}

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, const AttentionMask* mask,
                 Tensor<T>* weights_out) {
  const Tensor<T>& qv = q.value();
  const Tensor<T>& kv = k.value();
  const Tensor<T>& vv = v.value();
  if (qv.rank() != 2 || kv.rank() != 2 || vv.rank() != 2) {
    throw DimensionError("attention: q, k, v must be matrices");
  }
  const std::size_t n = qv.dim(0), m = kv.dim(0), d = qv.dim(1);
  if (kv.dim(1) != d || vv.dim(1) != d || vv.dim(0) != m) {
    throw DimensionError("attention: q/k/v widths disagree");
  }
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (mask && (mask->rows() != n || mask->cols() != m)) {
    throw DimensionError("attention: mask shape does not match [" + std::to_string(n) + "," +
                         std::to_string(m) + "]");
  }
  const std::size_t dh = d / heads;
  const T scale_factor = T(1) / std::sqrt(T(dh));
  auto probs = std::make_shared<std::vector<T>>(heads * n * m);
  Tensor<T> out({n, d});
  std::vector<T> scores(n * m);
  for (std::size_t hh = 0; hh < heads; ++hh) {
    for (std::size_t i = 0; i < n; ++i) {
      const T* qi = qv.raw() + i * d + hh * dh;
      for (std::size_t j = 0; j < m; ++j) {
        const T* kj = kv.raw() + j * d + hh * dh;
        T s = 0;
        for (std::size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
        scores[i * m + j] = s * scale_factor;
      }
    }
    T* p = probs->data() + hh * n * m;
    for (std::size_t i = 0; i < n; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < m; ++j) {
        if (!mask || mask->allowed(i, j)) mx = std::max(mx, scores[i * m + j]);
      }
      T total = 0;
      for (std::size_t j = 0; j < m; ++j) {
        const bool ok = !mask || mask->allowed(i, j);
        const T e = ok ? std::exp(scores[i * m + j] - mx) : T(0);
        p[i * m + j] = e;
        total += e;
      }
      for (std::size_t j = 0; j < m; ++j) p[i * m + j] /= total;
      T* oi = out.raw() + i * d + hh * dh;
      for (std::size_t j = 0; j < m; ++j) {
        const T pij = p[i * m + j];
        if (pij == T(0)) continue;
        const T* vj = vv.raw() + j * d + hh * dh;
        for (std::size_t t = 0; t < dh; ++t) oi[t] += pij * vj[t];
      }
    }
  }
  if (weights_out) *weights_out = Tensor<T>({heads, n, m}, *probs);
  return ctx_of(q).record(
      std::move(out), {q, k, v},
      [q, k, v, heads, n, m, d, dh, scale_factor, probs](DiffContext<T>& c, std::uint32_t self) {
        const Tensor<T>& g = c.upstream(self);
        const Tensor<T>& qv = c.value(q);
        const Tensor<T>& kv = c.value(k);
        const Tensor<T>& vv = c.value(v);
        Tensor<T>* gq = c.needs_grad(q) ? &c.accumulate_into(q) : nullptr;
        Tensor<T>* gk = c.needs_grad(k) ? &c.accumulate_into(k) : nullptr;
        Tensor<T>* gv = c.needs_grad(v) ? &c.accumulate_into(v) : nullptr;
        std::vector<T> dp(m);
        for (std::size_t hh = 0; hh < heads; ++hh) {
          const T* p = probs->data() + hh * n * m;
          for (std::size_t i = 0; i < n; ++i) {
            const T* gi = g.raw() + i * d + hh * dh;
            T dot = 0;
            for (std::size_t j = 0; j < m; ++j) {
              const T pij = p[i * m + j];
              const T* vj = vv.raw() + j * d + hh * dh;
              T s = 0;
              for (std::size_t t = 0; t < dh; ++t) s += gi[t] * vj[t];
              dp[j] = s;
              dot += s * pij;
              if (gv && pij != T(0)) {
                T* gvj = gv->raw() + j * d + hh * dh;
                for (std::size_t t = 0; t < dh; ++t) gvj[t] += pij * gi[t];
              }
            }
            const T* qi = qv.raw() + i * d + hh * dh;
            for (std::size_t j = 0; j < m; ++j) {
              const T pij = p[i * m + j];
              if (pij == T(0)) continue;
              const T ds = pij * (dp[j] - dot) * scale_factor;
              const T* kj = kv.raw() + j * d + hh * dh;
              if (gq) {
                T* gqi = gq->raw() + i * d + hh * dh;
                for (std::size_t t = 0; t < dh; ++t) gqi[t] += ds * kj[t];
              }
              if (gk) {
                T* gkj = gk->raw() + j * d + hh * dh;
                for (std::size_t t = 0; t < dh; ++t) gkj[t] += ds * qi[t];
              }
            }
          }
        }
      },
      "attention");
}

template <typename T>
Var<T> bilinear_sample(Var<T> feature, Var<T> points) {
  Tensor<T> out = kernels::bilinear_sample(feature.value(), points.value());
  return ctx_of(feature).record(
      std::move(out), {feature, points},
      [feature, points](DiffContext<T>& c, std::uint32_t self) {
        const Tensor<T>& g = c.upstream(self);
        const Tensor<T>& f = c.value(feature);
        const Tensor<T>& pts = c.value(points);
        const std::size_t h = f.dim(0), w = f.dim(1), ch = f.dim(2);
        Tensor<T>* gf = c.needs_grad(feature) ? &c.accumulate_into(feature) : nullptr;
        Tensor<T>* gp = c.needs_grad(points) ? &c.accumulate_into(points) : nullptr;
        for (std::size_t i = 0; i < pts.dim(0); ++i) {
          const auto bc = kernels::bilinear_corners(pts.at(i, 0), pts.at(i, 1));
          const T* gi = g.raw() + i * ch;
          const long xs[4] = {bc.x0, bc.x0 + 1, bc.x0, bc.x0 + 1};
          const long ys[4] = {bc.y0, bc.y0, bc.y0 + 1, bc.y0 + 1};
          const T wts[4] = {(1 - bc.fx) * (1 - bc.fy), bc.fx * (1 - bc.fy), (1 - bc.fx) * bc.fy,
                            bc.fx * bc.fy};
          // d(weight)/dx and d(weight)/dy per corner
          const T dwx[4] = {-(1 - bc.fy), (1 - bc.fy), -bc.fy, bc.fy};
          const T dwy[4] = {-(1 - bc.fx), -bc.fx, (1 - bc.fx), bc.fx};
          for (int q = 0; q < 4; ++q) {
            if (xs[q] < 0 || ys[q] < 0 || xs[q] >= static_cast<long>(w) ||
                ys[q] >= static_cast<long>(h)) {
              continue;
            }
            const std::size_t base =
                (static_cast<std::size_t>(ys[q]) * w + static_cast<std::size_t>(xs[q])) * ch;
            T dot = 0;
            for (std::size_t k = 0; k < ch; ++k) {
              if (gf) (*gf)[base + k] += wts[q] * gi[k];
              dot += gi[k] * f[base + k];
            }
            if (gp) {
              gp->at(i, 0) += dwx[q] * dot;
              gp->at(i, 1) += dwy[q] * dot;
            }
          }
        }
      },
      "bilinear_sample");
}

template <typename T>
Var<T> deform_sample(Var<T> value, const std::vector<LevelShape>& levels, Var<T> locations,
                     Var<T> weights, std::size_t heads) {
  const Tensor<T>& vv = value.value();
  const Tensor<T>& lv = locations.value();
  const Tensor<T>& wv = weights.value();
  if (vv.rank() != 2) throw DimensionError("deform_sample: value must be [M, d]");
  const std::size_t d = vv.dim(1);
  if (heads == 0 || d % heads) throw ConfigError("deform_sample: width not divisible by heads");
  const std::size_t nl = levels.size();
  if (lv.rank() != 5 || lv.dim(1) != heads || lv.dim(2) != nl || lv.dim(4) != 2) {
    throw DimensionError("deform_sample: locations must be [N, heads, levels, points, 2]");
  }
  const std::size_t nq = lv.dim(0), np = lv.dim(3);
  if (wv.shape() != Shape{nq, heads, nl, np}) {
    throw DimensionError("deform_sample: weights must be [N, heads, levels, points]");
  }
  for (const auto& lvl : levels) {
    if (lvl.start + lvl.height * lvl.width > vv.dim(0)) {
      throw DimensionError("deform_sample: level layout exceeds value rows");
    }
  }
  const std::size_t dh = d / heads;
  Tensor<T> out({nq, d});
  for (std::size_t n = 0; n < nq; ++n) {
    for (std::size_t hh = 0; hh < heads; ++hh) {
      T* o = out.raw() + n * d + hh * dh;
      for (std::size_t l = 0; l < nl; ++l) {
        const auto& lvl = levels[l];
        const T* base = vv.raw() + lvl.start * d;
        for (std::size_t p = 0; p < np; ++p) {
          const std::size_t li = (((n * heads + hh) * nl + l) * np + p);
          const T x = lv[li * 2] * T(lvl.width) - T(0.5);
          const T y = lv[li * 2 + 1] * T(lvl.height) - T(0.5);
          kernels::bilinear_accumulate(base, lvl.height, lvl.width, d, hh * dh, dh, x, y, wv[li], o);
        }
      }
    }
  }
  return ctx_of(value).record(
      std::move(out), {value, locations, weights},
      [value, locations, weights, levels, heads, nq, nl, np, d, dh](DiffContext<T>& c,
                                                                   std::uint32_t self) {
        const Tensor<T>& g = c.upstream(self);
        const Tensor<T>& vv = c.value(value);
        const Tensor<T>& lv = c.value(locations);
        const Tensor<T>& wv = c.value(weights);
        Tensor<T>* gval = c.needs_grad(value) ? &c.accumulate_into(value) : nullptr;
        Tensor<T>* gloc = c.needs_grad(locations) ? &c.accumulate_into(locations) : nullptr;
        Tensor<T>* gw = c.needs_grad(weights) ? &c.accumulate_into(weights) : nullptr;
        for (std::size_t n = 0; n < nq; ++n) {
          for (std::size_t hh = 0; hh < heads; ++hh) {
            const T* gi = g.raw() + n * d + hh * dh;
            for (std::size_t l = 0; l < nl; ++l) {
              const auto& lvl = levels[l];
              for (std::size_t p = 0; p < np; ++p) {
                const std::size_t li = (((n * heads + hh) * nl + l) * np + p);
                const T x = lv[li * 2] * T(lvl.width) - T(0.5);
                const T y = lv[li * 2 + 1] * T(lvl.height) - T(0.5);
                const T a = wv[li];
                const auto bc = kernels::bilinear_corners(x, y);
                const long xs[4] = {bc.x0, bc.x0 + 1, bc.x0, bc.x0 + 1};
                const long ys[4] = {bc.y0, bc.y0, bc.y0 + 1, bc.y0 + 1};
                const T wts[4] = {(1 - bc.fx) * (1 - bc.fy), bc.fx * (1 - bc.fy),
                                  (1 - bc.fx) * bc.fy, bc.fx * bc.fy};
                const T dwx[4] = {-(1 - bc.fy), (1 - bc.fy), -bc.fy, bc.fy};
                const T dwy[4] = {-(1 - bc.fx), -bc.fx, (1 - bc.fx), bc.fx};
                T dsample = 0, dx = 0, dy = 0;
                for (int q = 0; q < 4; ++q) {
                  if (xs[q] < 0 || ys[q] < 0 || xs[q] >= static_cast<long>(lvl.width) ||
                      ys[q] >= static_cast<long>(lvl.height)) {
                    continue;
                  }
                  const std::size_t row = lvl.start + static_cast<std::size_t>(ys[q]) * lvl.width +
                                          static_cast<std::size_t>(xs[q]);
                  const T* src = vv.raw() + row * d + hh * dh;
                  T dot = 0;
                  for (std::size_t t = 0; t < dh; ++t) dot += gi[t] * src[t];
                  dsample += wts[q] * dot;
                  dx += dwx[q] * dot;
                  dy += dwy[q] * dot;
                  if (gval) {
                    T* dst = gval->raw() + row * d + hh * dh;
                    const T cw = a * wts[q];
                    for (std::size_t t = 0; t < dh; ++t) dst[t] += cw * gi[t];
                  }
                }
                if (gw) (*gw)[li] += dsample;
                if (gloc) {
                  (*gloc)[li * 2] += a * dx * T(lvl.width);
                  (*gloc)[li * 2 + 1] += a * dy * T(lvl.height);
                }
              }
            }
          }
        }
      },
      "deform_sample");
}

template <typename T>
Var<T> box_sampling_locations(Var<T> refs, Var<T> offsets, std::size_t heads, std::size_t levels,
                              std::size_t points) {
  const Tensor<T>& rv = refs.value();
  const Tensor<T>& ov = offsets.value();
  const std::size_t per_query = heads * levels * points;
  if (rv.rank() != 2 || rv.dim(1) != 4) throw DimensionError("box_sampling_locations: refs must be [N, 4]");
  const std::size_t nq = rv.dim(0);
  if (ov.shape() != Shape{nq, per_query * 2}) {
    throw DimensionError("box_sampling_locations: offsets must be [N, heads*levels*points*2]");
  }
  Tensor<T> out({nq, heads, levels, points, 2});
  for (std::size_t n = 0; n < nq; ++n) {
    for (std::size_t s = 0; s < per_query; ++s) {
      const std::size_t i = n * per_query + s;
      out[i * 2] = rv.at(n, 0) + ov[i * 2] * rv.at(n, 2) * T(0.5);
      out[i * 2 + 1] = rv.at(n, 1) + ov[i * 2 + 1] * rv.at(n, 3) * T(0.5);
    }
  }
  return ctx_of(refs).record(
      std::move(out), {refs, offsets},
      [refs, offsets, nq, per_query](DiffContext<T>& c, std::uint32_t self) {
        const Tensor<T>& g = c.upstream(self);
        const Tensor<T>& rv = c.value(refs);
        const Tensor<T>& ov = c.value(offsets);
        Tensor<T>* gr = c.needs_grad(refs) ? &c.accumulate_into(refs) : nullptr;
        Tensor<T>* go = c.needs_grad(offsets) ? &c.accumulate_into(offsets) : nullptr;
        for (std::size_t n = 0; n < nq; ++n) {
          for (std::size_t s = 0; s < per_query; ++s) {
            const std::size_t i = n * per_query + s;
            const T gx = g[i * 2], gy = g[i * 2 + 1];
            if (gr) {
              gr->at(n, 0) += gx;
              gr->at(n, 1) += gy;
              gr->at(n, 2) += gx * ov[i * 2] * T(0.5);
              gr->at(n, 3) += gy * ov[i * 2 + 1] * T(0.5);
            }
            if (go) {
              (*go)[i * 2] += gx * rv.at(n, 2) * T(0.5);
              (*go)[i * 2 + 1] += gy * rv.at(n, 3) * T(0.5);
            }
          }
        }
      },
      "box_sampling_locations");
}

namespace {

template <typename T>
constexpr T kBoxEps = T(1e-6);

// sigmoid(delta + logit(r)) written as r / (r + (1 - r) e^{-delta}) for
// delta >= 0 and r e^{delta} / (r e^{delta} + 1 - r) otherwise; both reduce
// to r / 1 exactly at delta == 0.
template <typename T>
T refine_value(T r, T delta) {
  if (delta >= T(0)) return r / (r + (T(1) - r) * std::exp(-delta));
  const T e = r * std::exp(delta);
  return e / (e + (T(1) - r));
}

}  // namespace

template <typename T>
Var<T> box_refine(Var<T> ref, Var<T> delta) {
  require_same_shape(ref, delta, "box_refine");
  const Tensor<T>& rv = ref.value();
  const Tensor<T>& dv = delta.value();
  Tensor<T> out(rv.shape());
  for (std::size_t i = 0; i < rv.numel(); ++i) {
    out[i] = std::clamp(refine_value(rv[i], dv[i]), kBoxEps<T>, T(1) - kBoxEps<T>);
  }
  return ctx_of(ref).record(
      std::move(out), {ref, delta},
      [ref, delta](DiffContext<T>& c, std::uint32_t self) {
        const Tensor<T>& g = c.upstream(self);
        const Tensor<T>& rv = c.value(ref);
        const Tensor<T>& dv = c.value(delta);
        Tensor<T>* gr = c.needs_grad(ref) ? &c.accumulate_into(ref) : nullptr;
        Tensor<T>* gd = c.needs_grad(delta) ? &c.accumulate_into(delta) : nullptr;
        for (std::size_t i = 0; i < g.numel(); ++i) {
          const T y = refine_value(rv[i], dv[i]);
          if (y <= kBoxEps<T> || y >= T(1) - kBoxEps<T>) continue;
          const T dy = y * (T(1) - y);
          if (gd) (*gd)[i] += g[i] * dy;
          const T rr = rv[i] * (T(1) - rv[i]);
          if (gr && rr > T(0)) (*gr)[i] += g[i] * dy / rr;
        }
      },
      "box_refine");
}

template <typename T>
Var<T> bce_with_logits_sum(Var<T> logits, const Tensor<T>& targets) {
  const Tensor<T>& xv = logits.value();
  if (xv.shape() != targets.shape()) throw DimensionError("bce_with_logits_sum: target shape mismatch");
  T total = 0;
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    const T x = xv[i];
    total += std::max(x, T(0)) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
  }
  return ctx_of(logits).record(
      Tensor<T>::scalar(total), {logits},
      [logits, targets](DiffContext<T>& c, std::uint32_t self) {
        const T g = c.upstream(self)[0];
        const Tensor<T>& xv = c.value(logits);
        Tensor<T>& gx = c.accumulate_into(logits);
        for (std::size_t i = 0; i < xv.numel(); ++i) {
          const T x = xv[i];
          const T s = x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
          gx[i] += g * (s - targets[i]);
        }
      },
      "bce_with_logits_sum");
}

template <typename T>
Var<T> l1_sum(Var<T> pred, const Tensor<T>& target) {
  const Tensor<T>& pv = pred.value();
  if (pv.shape() != target.shape()) throw DimensionError("l1_sum: target shape mismatch");
  T total = 0;
  for (std::size_t i = 0; i < pv.numel(); ++i) total += std::abs(pv[i] - target[i]);
  return ctx_of(pred).record(
      Tensor<T>::scalar(total), {pred},
      [pred, target](DiffContext<T>& c, std::uint32_t self) {
        const T g = c.upstream(self)[0];
        const Tensor<T>& pv = c.value(pred);
        Tensor<T>& gp = c.accumulate_into(pred);
        for (std::size_t i = 0; i < pv.numel(); ++i) {
          const T diff = pv[i] - target[i];
          gp[i] += g * (diff > 0 ? T(1) : (diff < 0 ? T(-1) : T(0)));
        }
      },
      "l1_sum");
}

template <typename T>
Var<T> giou_loss_sum(Var<T> pred, const Tensor<T>& target) {
  const Tensor<T>& pv = pred.value();
  if (pv.rank() != 2 || pv.dim(1) != 4 || pv.shape() != target.shape()) {
    throw DimensionError("giou_loss_sum: boxes must be [n, 4] with matching target");
  }
  T total = 0;
  for (std::size_t i = 0; i < pv.dim(0); ++i) {
    total += T(1) - box::giou<T>(pv.raw() + i * 4, target.raw() + i * 4);
  }
  return ctx_of(pred).record(
      Tensor<T>::scalar(total), {pred},
      [pred, target](DiffContext<T>& c, std::uint32_t self) {
        using D = box::Dual<T>;
        const T g = c.upstream(self)[0];
        const Tensor<T>& pv = c.value(pred);
        Tensor<T>& gp = c.accumulate_into(pred);
        for (std::size_t i = 0; i < pv.dim(0); ++i) {
          for (std::size_t j = 0; j < 4; ++j) {
            std::array<D, 4> a;
            for (std::size_t t = 0; t < 4; ++t) a[t] = D(pv.at(i, t), t == j ? T(1) : T(0));
            const D val = box::giou<D>(a, target.raw() + i * 4);
            gp.at(i, j) -= g * val.d;
          }
        }
      },
      "giou_loss_sum");
}

#define EFH_INSTANTIATE_OPS(T)                                                                  \
  template Var<T> add<T>(Var<T>, Var<T>);                                                       \
  template Var<T> sub<T>(Var<T>, Var<T>);                                                       \
  template Var<T> mul<T>(Var<T>, Var<T>);                                                       \
  template Var<T> scale<T>(Var<T>, T);                                                          \
  template Var<T> add_row<T>(Var<T>, Var<T>);                                                   \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                                    \
  template Var<T> linear<T>(Var<T>, Var<T>, Var<T>);                                            \
  template Var<T> transpose<T>(Var<T>);                                                         \
  template Var<T> relu<T>(Var<T>);                                                              \
  template Var<T> gelu<T>(Var<T>);                                                              \
  template Var<T> silu<T>(Var<T>);                                                              \
  template Var<T> sigmoid<T>(Var<T>);                                                           \
  template Var<T> softmax<T>(Var<T>, std::size_t);                                              \
  template Var<T> layer_norm<T>(Var<T>, Var<T>, Var<T>, T);                                     \
  template Var<T> reshape<T>(Var<T>, Shape);                                                    \
  template Var<T> concat<T>(const std::vector<Var<T>>&, std::size_t);                           \
  template Var<T> slice<T>(Var<T>, std::size_t, std::size_t, std::size_t);                      \
  template Var<T> gather_rows<T>(Var<T>, const std::vector<std::size_t>&);                      \
  template Var<T> sum<T>(Var<T>);                                                               \
  template Var<T> mean<T>(Var<T>);                                                              \
  template Var<T> conv2d<T>(Var<T>, Var<T>, Var<T>, std::size_t, std::size_t, std::size_t);     \
  template Var<T> upsample2x<T>(Var<T>);                                                        \
  template Var<T> attention<T>(Var<T>, Var<T>, Var<T>, std::size_t, const AttentionMask*,       \
                               Tensor<T>*);                                                     \
  template Var<T> bilinear_sample<T>(Var<T>, Var<T>);                                           \
  template Var<T> deform_sample<T>(Var<T>, const std::vector<LevelShape>&, Var<T>, Var<T>,      \
                                   std::size_t);                                                \
  template Var<T> box_sampling_locations<T>(Var<T>, Var<T>, std::size_t, std::size_t,           \
                                            std::size_t);                                       \
  template Var<T> box_refine<T>(Var<T>, Var<T>);                                                \
  template Var<T> bce_with_logits_sum<T>(Var<T>, const Tensor<T>&);                             \
  template Var<T> l1_sum<T>(Var<T>, const Tensor<T>&);                                          \
  template Var<T> giou_loss_sum<T>(Var<T>, const Tensor<T>&);

EFH_INSTANTIATE_OPS(float)
EFH_INSTANTIATE_OPS(double)

#undef EFH_INSTANTIATE_OPS

}  // namespace efh::ops
