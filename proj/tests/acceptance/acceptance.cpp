// Acceptance runner: one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "efh/bench_cli/commands.hpp"
#include "efh/numcore/grad_check.hpp"
#include "efh/numcore/kernels.hpp"
#include "efh/numcore/ops.hpp"
#include "fixtures.hpp"

using namespace efh;
namespace fs = std::filesystem;
using efh::training::Box;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

/// Collects failed requirements; the first few are reported.
class Tally {
 public:
  void require(bool ok, const std::string& what) {
    if (ok) return;
    pass_ = false;
    if (failures_.size() < 3) failures_.push_back(what);
  }
  void note(const std::string& s) { notes_.push_back(s); }
  Outcome outcome() const {
    std::string d;
    for (const auto& n : notes_) d += (d.empty() ? "" : "; ") + n;
    for (const auto& f : failures_) d += (d.empty() ? "" : "; ") + std::string("failed: ") + f;
    return {pass_, d};
  }

 private:
  bool pass_ = true;
  std::vector<std::string> failures_;
  std::vector<std::string> notes_;
};

std::string fmt(double v, const char* spec = "%.3g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

TensorD random_tensor(CounterRng& rng, Shape shape, double scale = 1.0) {
  TensorD t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(-scale, scale);
  return t;
}

TensorD random_boxes(CounterRng& rng, std::size_t n) {
  TensorD b({n, 4});
  for (std::size_t i = 0; i < n; ++i) {
    b.at(i, 0) = rng.uniform(0.15, 0.85);
    b.at(i, 1) = rng.uniform(0.15, 0.85);
    b.at(i, 2) = rng.uniform(0.05, 0.5);
    b.at(i, 3) = rng.uniform(0.05, 0.5);
  }
  return b;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Scratch directory with synthetic images at the default canvas.
struct Scratch {
  fs::path root;
  fs::path images;
  explicit Scratch(const fs::path& base) {
    root = base;
    images = root / "imgs";
    fs::create_directories(images);
    const auto vocab = training::default_vocabulary();
    for (int i = 0; i < 4; ++i)
      imgbackbone::save_ppm(images / ("scene" + std::to_string(i) + ".ppm"),
                            training::generate_synthetic_scene(1000 + i, 64, vocab).image);
  }
  std::string path(const std::string& leaf) const { return (root / leaf).string(); }
};

// ---------------------------------------------------------------- oracles

TensorD naive_matmul(const TensorD& a, const TensorD& b) {
  TensorD out({a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < b.dim(1); ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.dim(1); ++k) s += a.at(i, k) * b.at(k, j);
      out.at(i, j) = s;
    }
  return out;
}

// Softmax of a row-major [outer, n, inner] view along the middle axis.
TensorD naive_softmax(const TensorD& x, std::size_t axis) {
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  TensorD out(s);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      auto at = [&](std::size_t j) { return (o * n + j) * inner + in; };
      double mx = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[at(j)]);
      double z = 0;
      for (std::size_t j = 0; j < n; ++j) z += std::exp(x[at(j)] - mx);
      for (std::size_t j = 0; j < n; ++j) out[at(j)] = std::exp(x[at(j)] - mx) / z;
    }
  return out;
}

// Four-corner interpolation with zero outside the grid; integer
// coordinates address cell centers.
TensorD naive_bilinear(const TensorD& f, const TensorD& pts) {
  const std::size_t h = f.dim(0), w = f.dim(1), c = f.dim(2), n = pts.dim(0);
  TensorD out({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    const double x = pts.at(i, 0), y = pts.at(i, 1);
    const double x0 = std::floor(x), y0 = std::floor(y);
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double cx = x0 + dx, cy = y0 + dy;
        if (cx < 0 || cy < 0 || cx >= double(w) || cy >= double(h)) continue;
        const double wt = (1 - std::abs(x - cx)) * (1 - std::abs(y - cy));
        for (std::size_t k = 0; k < c; ++k) out.at(i, k) += wt * f.at(std::size_t(cy), std::size_t(cx), k);
      }
  }
  return out;
}

std::vector<std::size_t> sort_oracle(const std::vector<double>& v, std::size_t k) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] > v[b]; });
  order.resize(k);
  return order;
}

// Exhaustive assignment: best total and the permutation achieving it.
std::pair<double, std::vector<std::size_t>> brute_force_assignment(const std::vector<double>& cost,
                                                                   std::size_t rows,
                                                                   std::size_t cols) {
  std::vector<std::size_t> perm(cols);
  std::iota(perm.begin(), perm.end(), 0);
  double best = INFINITY;
  std::vector<std::size_t> arg;
  do {
    double s = 0;
    for (std::size_t r = 0; r < rows; ++r) s += cost[r * cols + perm[r]];
    if (s < best) {
      best = s;
      arg.assign(perm.begin(), perm.begin() + rows);
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return {best, arg};
}

double naive_giou(const Box& a, const Box& b) {
  const double ax0 = a[0] - a[2] / 2, ax1 = a[0] + a[2] / 2, ay0 = a[1] - a[3] / 2, ay1 = a[1] + a[3] / 2;
  const double bx0 = b[0] - b[2] / 2, bx1 = b[0] + b[2] / 2, by0 = b[1] - b[3] / 2, by1 = b[1] + b[3] / 2;
  const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
  const double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
  const double inter = iw * ih;
  const double uni = a[2] * a[3] + b[2] * b[3] - inter;
  const double hull = (std::max(ax1, bx1) - std::min(ax0, bx0)) * (std::max(ay1, by1) - std::min(ay0, by0));
  return inter / uni - (hull - uni) / hull;
}

Outcome kernel_oracles() {
  constexpr int kTrials = 1000;
  constexpr double kTol = 1e-10;
  Tally t;
  CounterRng rng(101);
  double worst = 0;

  for (int i = 0; i < kTrials; ++i) {
    const std::size_t m = 1 + rng.below(6), k = 1 + rng.below(6), n = 1 + rng.below(6);
    const TensorD a = random_tensor(rng, {m, k}), b = random_tensor(rng, {k, n});
    const TensorD got = kernels::matmul(a, b), want = naive_matmul(a, b);
    for (std::size_t j = 0; j < got.numel(); ++j) worst = std::max(worst, std::abs(got[j] - want[j]));
  }
  t.require(worst <= kTol, "matmul max err " + fmt(worst));
  t.note("matmul err " + fmt(worst));

  worst = 0;
  for (int i = 0; i < kTrials; ++i) {
    const std::size_t rank = 1 + rng.below(3);
    Shape s;
    for (std::size_t r = 0; r < rank; ++r) s.push_back(1 + rng.below(5));
    const TensorD x = random_tensor(rng, s, rng.bernoulli(0.2) ? 200.0 : 4.0);
    const std::size_t axis = rng.below(rank);
    const TensorD got = kernels::softmax(x, axis), want = naive_softmax(x, axis);
    for (std::size_t j = 0; j < got.numel(); ++j) worst = std::max(worst, std::abs(got[j] - want[j]));
  }
  t.require(worst <= kTol, "softmax max err " + fmt(worst));
  t.note("softmax err " + fmt(worst));

  std::size_t topk_bad = 0;
  for (int i = 0; i < kTrials; ++i) {
    const std::size_t n = 1 + rng.below(40);
    std::vector<double> v(n);
    const bool ties = rng.bernoulli(0.5);
    for (auto& x : v) x = ties ? double(rng.below(6)) : rng.uniform(-1, 1);
    const std::size_t k = 1 + rng.below(n);
    topk_bad += kernels::top_k<double>(v, k) != sort_oracle(v, k);
  }
  t.require(topk_bad == 0, std::to_string(topk_bad) + " top_k mismatches");

  worst = 0;
  for (int i = 0; i < kTrials; ++i) {
    const std::size_t h = 1 + rng.below(6), w = 1 + rng.below(6), c = 1 + rng.below(3), n = 1 + rng.below(6);
    const TensorD f = random_tensor(rng, {h, w, c});
    TensorD pts({n, 2});
    for (std::size_t j = 0; j < n; ++j) {
      pts.at(j, 0) = rng.uniform(-1.5, double(w) + 0.5);
      pts.at(j, 1) = rng.uniform(-1.5, double(h) + 0.5);
      if (rng.bernoulli(0.1)) pts.at(j, 0) = std::round(pts.at(j, 0));
    }
    const TensorD got = kernels::bilinear_sample(f, pts), want = naive_bilinear(f, pts);
    for (std::size_t j = 0; j < got.numel(); ++j) worst = std::max(worst, std::abs(got[j] - want[j]));
  }
  t.require(worst <= kTol, "bilinear max err " + fmt(worst));
  t.note("bilinear err " + fmt(worst));

  std::size_t hung_bad = 0;
  for (int i = 0; i < kTrials; ++i) {
    const std::size_t cols = 1 + rng.below(7), rows = 1 + rng.below(cols);
    std::vector<double> integer(rows * cols), real(rows * cols);
    for (auto& v : integer) v = double(rng.below(20));
    for (auto& v : real) v = rng.uniform(0, 10);
    const auto ai = training::hungarian(integer, rows, cols);
    double si = 0;
    for (std::size_t r = 0; r < rows; ++r) si += integer[r * cols + ai[r]];
    std::set<std::size_t> distinct(ai.begin(), ai.end());
    hung_bad += distinct.size() != rows || si != brute_force_assignment(integer, rows, cols).first;
    hung_bad += training::hungarian(real, rows, cols) != brute_force_assignment(real, rows, cols).second;
  }
  t.require(hung_bad == 0, std::to_string(hung_bad) + " hungarian mismatches");

  worst = 0;
  for (int i = 0; i < kTrials; ++i) {
    const Box a{rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.01, 0.6), rng.uniform(0.01, 0.6)};
    Box b{rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.01, 0.6), rng.uniform(0.01, 0.6)};
    if (i % 10 == 0) b = {a[0], a[1], a[2] * 0.5, a[3] * 0.5};  // nested
    worst = std::max(worst, std::abs(training::giou(a, b) - naive_giou(a, b)));
  }
  t.require(worst <= kTol, "giou max err " + fmt(worst));
  t.note("giou err " + fmt(worst));
  t.note("top_k and hungarian exact over " + std::to_string(kTrials) + " instances each");
  return t.outcome();
}

// ---------------------------------------------------------------- gradients

Var<double> project(DiffContext<double>& ctx, Var<double> y, std::uint64_t seed) {
  CounterRng rng(seed, 77);
  return ops::sum(ops::mul(y, ctx.constant(random_tensor(rng, y.value().shape()))));
}

/// Decoder at tiny dims with random offsets so sampling is non-trivial.
struct DecoderSetup {
  ela_decoder::DecoderConfig cfg;
  ParamStore<double> store;
  std::vector<ops::LevelShape> levels{{4, 4, 0}, {2, 2, 16}, {1, 1, 20}};
  TensorD memory;

  DecoderSetup() {
    cfg.d = 16;
    cfg.d_text = 8;
    cfg.heads = 2;
    cfg.points = 2;
    cfg.layers = 2;
    cfg.num_queries = 5;
    ela_decoder::init_decoder(store, Init{31}, cfg);
    CounterRng rng(31, 1);
    memory = random_tensor(rng, {21, cfg.d});
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string p = "decoder.layer" + std::to_string(l) + ".deform";
      for (auto& v : store.get(p + ".offsets.w").data()) v = rng.uniform(-0.3, 0.3);
      for (auto& v : store.get(p + ".weights.w").data()) v = rng.uniform(-0.5, 0.5);
    }
  }

  ela_encoder::EncodedFeatures<double> encoded(DiffContext<double>& ctx) const {
    ela_encoder::EncodedFeatures<double> enc;
    enc.levels = levels;
    enc.anchors = ela_encoder::make_anchors<double>(levels, 0.05, &enc.scale);
    enc.memory = ctx.constant(memory);
    return enc;
  }
};

Outcome gradient_suite() {
  constexpr double kTol = 1e-4;
  Tally t;
  CounterRng rng(202);
  double worst = 0;
  std::string worst_name;
  std::size_t checks = 0;
  auto record = [&](const std::string& name, const ScalarFn& f, std::vector<TensorD> in) {
    const double e = grad_check(f, std::move(in));
    ++checks;
    if (!(e <= worst)) {
      worst = e;
      worst_name = name;
    }
    t.require(e <= kTol, name + " rel err " + fmt(e));
  };
  auto unary = [&](const std::string& name, std::function<Var<double>(Var<double>)> op, TensorD x) {
    record(name, [op](DiffContext<double>& c, const std::vector<Var<double>>& in) {
      return project(c, op(in[0]), 1);
    }, {std::move(x)});
  };
  auto binary = [&](const std::string& name, std::function<Var<double>(Var<double>, Var<double>)> op,
                    TensorD a, TensorD b) {
    record(name, [op](DiffContext<double>& c, const std::vector<Var<double>>& in) {
      return project(c, op(in[0], in[1]), 2);
    }, {std::move(a), std::move(b)});
  };

  const TensorD a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {3, 4});
  binary("add", ops::add<double>, a, b);
  binary("sub", ops::sub<double>, a, b);
  binary("mul", ops::mul<double>, a, b);
  binary("concat0", [](auto x, auto y) { return ops::concat<double>({x, y}, 0); }, a, b);
  binary("concat1", [](auto x, auto y) { return ops::concat<double>({x, y}, 1); }, a, b);
  binary("matmul", ops::matmul<double>, random_tensor(rng, {3, 5}), random_tensor(rng, {5, 2}));
  binary("add_row", ops::add_row<double>, a, random_tensor(rng, {4}));
  unary("relu", ops::relu<double>, a);
  unary("gelu", ops::gelu<double>, a);
  unary("silu", ops::silu<double>, a);
  unary("sigmoid", ops::sigmoid<double>, a);
  unary("transpose", ops::transpose<double>, a);
  unary("sum", ops::sum<double>, a);
  unary("mean", ops::mean<double>, a);
  unary("scale", [](auto x) { return ops::scale(x, 1.7); }, a);
  unary("softmax0", [](auto x) { return ops::softmax(x, 0); }, a);
  unary("softmax1", [](auto x) { return ops::softmax(x, 1); }, a);
  unary("reshape", [](auto x) { return ops::reshape(x, {2, 6}); }, a);
  unary("slice", [](auto x) { return ops::add(ops::slice(x, 1, 0, 2), ops::slice(x, 1, 2, 4)); }, a);
  unary("gather_rows", [](auto x) { return ops::gather_rows(x, {2, 0, 2, 1}); }, a);
  unary("upsample2x", ops::upsample2x<double>, random_tensor(rng, {2, 3, 2}));

  record("linear", [](DiffContext<double>& c, const std::vector<Var<double>>& in) {
    return project(c, ops::linear(in[0], in[1], in[2]), 3);
  }, {random_tensor(rng, {3, 5}), random_tensor(rng, {5, 2}), random_tensor(rng, {2})});
  record("layer_norm", [](DiffContext<double>& c, const std::vector<Var<double>>& in) {
    return project(c, ops::layer_norm(in[0], in[1], in[2]), 4);
  }, {random_tensor(rng, {4, 6}), random_tensor(rng, {6}), random_tensor(rng, {6})});

  const AttentionMask mask(3, 4, {1, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1, 1});
  for (const AttentionMask* m : {static_cast<const AttentionMask*>(nullptr), &mask}) {
    record(m ? "attention_masked" : "attention", [m](DiffContext<double>& c, const std::vector<Var<double>>& in) {
      return project(c, ops::attention(in[0], in[1], in[2], 2, m), 5);
    }, {random_tensor(rng, {3, 4}), random_tensor(rng, {4, 4}), random_tensor(rng, {4, 4})});
  }
  for (auto [k, s, p] : {std::tuple<std::size_t, std::size_t, std::size_t>{3, 1, 1}, {3, 2, 1}, {2, 2, 0}, {1, 1, 0}}) {
    record("conv2d k" + std::to_string(k) + " s" + std::to_string(s),
           [k = k, s = s, p = p](DiffContext<double>& c, const std::vector<Var<double>>& in) {
             return project(c, ops::conv2d(in[0], in[1], in[2], k, s, p), 6);
           },
           {random_tensor(rng, {5, 4, 2}), random_tensor(rng, {k * k * 2, 3}), random_tensor(rng, {3})});
  }

  TensorD pts({5, 2});
  for (std::size_t i = 0; i < 5; ++i) {
    pts.at(i, 0) = rng.uniform(-0.7, 4.6) + 0.013;
    pts.at(i, 1) = rng.uniform(-0.7, 3.6) + 0.017;
  }
  binary("bilinear_sample", ops::bilinear_sample<double>, random_tensor(rng, {4, 5, 3}), pts);

  const std::vector<ops::LevelShape> levels{{4, 4, 0}, {2, 2, 16}};
  TensorD loc({3, 2, 2, 2, 2});
  for (auto& v : loc.data()) v = rng.uniform(0.02, 0.98);
  record("deform_sample", [&levels](DiffContext<double>& c, const std::vector<Var<double>>& in) {
    return project(c, ops::deform_sample(in[0], levels, in[1], in[2], 2), 7);
  }, {random_tensor(rng, {20, 4}), loc, random_tensor(rng, {3, 2, 2, 2})});
  binary("box_sampling_locations",
         [](auto r, auto o) { return ops::box_sampling_locations(r, o, 2, 2, 2); },
         random_boxes(rng, 3), random_tensor(rng, {3, 16}));
  binary("box_refine", ops::box_refine<double>, random_boxes(rng, 3), random_tensor(rng, {3, 4}, 2.0));

  TensorD soft = random_tensor(rng, {3, 4}, 0.5);
  for (auto& v : soft.data()) v += 0.5;
  const TensorD target_boxes = random_boxes(rng, 4);
  record("bce_with_logits_sum", [soft](DiffContext<double>&, const std::vector<Var<double>>& in) {
    return ops::bce_with_logits_sum(in[0], soft);
  }, {random_tensor(rng, {3, 4}, 4.0)});
  record("l1_sum", [target_boxes](DiffContext<double>&, const std::vector<Var<double>>& in) {
    return ops::l1_sum(in[0], target_boxes);
  }, {random_boxes(rng, 4)});
  record("giou_loss_sum", [target_boxes](DiffContext<double>&, const std::vector<Var<double>>& in) {
    return ops::giou_loss_sum(in[0], target_boxes);
  }, {random_boxes(rng, 4)});

  // one full decoder layer, through queries, prompt rows, boxes and memory
  {
    const DecoderSetup f;
    const std::size_t n = 3, tp = 2;
    const AttentionMask m = ela_decoder::build_dn_mask(2, 1, 1, tp);
    const TensorD wq = random_tensor(rng, {n, f.cfg.d}), wb = random_tensor(rng, {n, 4});
    record("decoder layer", [&](DiffContext<double>& c, const std::vector<Var<double>>& in) {
      auto enc = f.encoded(c);
      enc.memory = in[3];
      const auto out = ela_decoder::decoder_layer(c, f.store, f.cfg, 0, {in[0], in[1], in[2]}, enc, m, false);
      return ops::add(ops::sum(ops::mul(out.q, c.constant(wq))), ops::sum(ops::mul(out.boxes, c.constant(wb))));
    }, {random_tensor(rng, {n, f.cfg.d}), random_tensor(rng, {tp, f.cfg.d}), random_boxes(rng, n), f.memory});
  }

  // 20 random parameters of the end-to-end loss
  {
    const auto arch = test::tiny_arch();
    auto store = test::init_params<double>(arch, 13);
    const auto ex = test::synthetic_example(5, 32, 31);
    CounterRng dn_rng(3);
    const auto dn = training::make_dn_queries(ex.sample.gt, training::DnConfig{}, ex.sample.labels.size(), dn_rng);
    const StoreFn f = [&](DiffContext<double>& ctx, const ParamStore<double>& s) {
      return training::example_loss(ctx, s, arch, ex, training::LossWeights{}, dn);
    };
    CounterRng pick(4);
    const auto coords = pick_coordinates(store, 20, pick);
    const double e = param_spot_check(f, store, coords);
    ++checks;
    if (e > worst) {
      worst = e;
      worst_name = "end-to-end";
    }
    t.require(e <= kTol, "end-to-end rel err " + fmt(e));
    t.note("end-to-end 20 params err " + fmt(e));
  }
  t.note(std::to_string(checks) + " checks, max rel err " + fmt(worst) + " (" + worst_name + ")");
  return t.outcome();
}

// ---------------------------------------------------------------- structure

Outcome structural_invariants() {
  Tally t;
  CounterRng rng(303);

  // zero deltas reproduce the anchors in the encoder head
  {
    ela_encoder::EncoderConfig cfg;
    cfg.d = 16;
    cfg.d_text = 8;
    cfg.heads = 4;
    ParamStore<double> store;
    ela_encoder::init_encoder(store, Init{21}, cfg);
    auto& w = store.get("encoder.box_mlp.2.w");
    std::fill(w.data().begin(), w.data().end(), 0.0);
    DiffContext<double> ctx(false);
    ela_encoder::EncodedFeatures<double> enc;
    enc.levels = {{8, 8, 0}, {4, 4, 64}, {2, 2, 80}};
    enc.anchors = ela_encoder::make_anchors<double>(enc.levels, cfg.anchor_size, &enc.scale);
    enc.memory = ctx.constant(random_tensor(rng, {84, cfg.d}));
    t.require(bit_identical(ela_encoder::predict_candidate_boxes(ctx, store, enc).value(), enc.anchors),
              "encoder zero-delta boxes differ from anchors");
  }

  // zero refinement keeps the reference boxes through every decoder layer
  {
    DecoderSetup f;
    for (std::size_t l = 0; l < f.cfg.layers; ++l) {
      auto& w = f.store.get("decoder.layer" + std::to_string(l) + ".box_mlp.2.w");
      std::fill(w.data().begin(), w.data().end(), 0.0);
    }
    DiffContext<double> ctx(false);
    const auto enc = f.encoded(ctx);
    const TensorD b0 = random_boxes(rng, f.cfg.num_queries);
    const auto out = ela_decoder::run_decoder(ctx, f.store, f.cfg, ctx.constant(b0),
                                              ctx.constant(random_tensor(rng, {7, f.cfg.d_text})),
                                              ctx.constant(random_tensor(rng, {3, f.cfg.d})), enc);
    bool kept = out.layers.size() == f.cfg.layers;
    for (const auto& rec : out.layers) kept = kept && bit_identical(rec.boxes.value(), b0);
    t.require(kept, "decoder zero-delta boxes drift");
  }

  // selection is invariant to label order and positive label scale
  {
    ela_encoder::EncoderConfig cfg;
    cfg.d = 16;
    cfg.d_text = 8;
    cfg.heads = 4;
    ParamStore<double> store;
    ela_encoder::init_encoder(store, Init{21}, cfg);
    std::size_t bad = 0;
    for (int trial = 0; trial < 50; ++trial) {
      const TensorD memory = random_tensor(rng, {84, cfg.d});
      const TensorD labels = random_tensor(rng, {5, cfg.d_text});
      DiffContext<double> ctx(false);
      const auto boxes = ctx.constant(random_tensor(rng, {84, 4}));
      auto select = [&](const TensorD& l) {
        const TensorD proj = ela_encoder::project_labels(ctx, store, ctx.constant(l)).value();
        return ela_encoder::select_queries(ctx, boxes, ela_encoder::relevance_scores(memory, proj), 16);
      };
      const auto base = select(labels);
      std::vector<std::size_t> perm{3, 0, 4, 1, 2};
      TensorD permuted({5, cfg.d_text});
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t c = 0; c < cfg.d_text; ++c) permuted.at(i, c) = labels.at(perm[i], c);
      const auto p = select(permuted);
      bad += p.indices != base.indices || !bit_identical(p.boxes.value(), base.boxes.value());
      for (double s : {3.7, 0.01, 250.0}) {
        TensorD scaled = labels;
        for (auto& v : scaled.data()) v *= s;
        bad += select(scaled).indices != base.indices;
      }
    }
    t.require(bad == 0, std::to_string(bad) + " selection invariance violations");
  }

  // denoising mask rule table
  {
    std::size_t bad = 0, cells = 0;
    for (std::size_t g : {0, 1, 2})
      for (std::size_t m : {1, 2, 3})
        for (std::size_t k : {1, 4})
          for (std::size_t tp : {1, 3}) {
            const AttentionMask mask = ela_decoder::build_dn_mask(k, g, m, tp);
            const std::size_t dn = g * m, n = dn + k + tp;
            if (mask.rows() != n || mask.cols() != n) {
              ++bad;
              continue;
            }
            for (std::size_t r = 0; r < n; ++r)
              for (std::size_t c = 0; c < n; ++c) {
                const bool r_dn = r < dn, c_dn = c < dn;
                const bool want = r_dn ? (c_dn && r / m == c / m) : !c_dn;
                bad += mask.allowed(r, c) != want;
                ++cells;
              }
          }
    t.require(bad == 0, std::to_string(bad) + " dn mask cells wrong");
    t.note("dn mask " + std::to_string(cells) + " cells checked");
  }

  // total = od + dn exactly; od and dn are exact sums over decoder layers
  {
    const auto arch = test::tiny_arch();
    const auto store = test::init_params<double>(arch, 12);
    std::size_t bad = 0;
    for (int trial = 0; trial < 5; ++trial) {
      const auto ex = test::synthetic_example(40 + trial, 32, 31);
      CounterRng dn_rng(trial);
      const auto dn = training::make_dn_queries(ex.sample.gt, training::DnConfig{}, ex.sample.labels.size(), dn_rng);
      DiffContext<double> ctx;
      training::LossBreakdown br;
      const auto total = training::example_loss(ctx, store, arch, ex, training::LossWeights{}, dn, &br);
      bad += total.value()[0] != br.total || br.total != br.od_total + br.dn_total;

      DiffContext<double> c2;
      const auto labels = textenc::label_features(c2, store, arch.text, ex.sample.labels);
      const auto prompt = textenc::prompt_features(c2, store, arch.text, ex.sample.prompt);
      const auto inputs = training::dn_inputs(c2, store, dn, labels);
      const auto fw = model::forward(c2, store, arch, c2.constant(ex.image.cast<double>()), labels, prompt,
                                     dn.count() ? &inputs : nullptr);
      const auto od = training::detection_loss(c2, fw.decoded, ex.sample.gt, training::LossWeights{});
      const auto dl = training::dn_loss(c2, fw.decoded, ex.sample.gt, dn, training::LossWeights{});
      auto layer_sum = [](const auto& part) {
        double s = part.per_layer.empty() ? 0.0 : part.per_layer[0].value()[0];
        for (std::size_t l = 1; l < part.per_layer.size(); ++l) s += part.per_layer[l].value()[0];
        return s;
      };
      bad += od.per_layer.size() != arch.decoder.layers || dl.per_layer.size() != arch.decoder.layers;
      bad += od.value.value()[0] != layer_sum(od) || dl.value.value()[0] != layer_sum(dl);
      bad += od.value.value()[0] != br.od_total || dl.value.value()[0] != br.dn_total;
      bad += training::total_loss(od.value, dl.value).value()[0] != br.total;
    }
    t.require(bad == 0, std::to_string(bad) + " loss additivity violations");
  }
  return t.outcome();
}

// ---------------------------------------------------------------- cache

Outcome cache_equivalence() {
  Tally t;
  const bench_cli::ModelConfig cfg;
  ParamStore<float> params;
  model::init_model(params, cfg.seed, cfg.arch());
  textenc::apply_text_freeze(params, cfg.arch().text);
  const model::Detector det(cfg.arch(), std::move(params));
  const auto vocab = training::default_vocabulary();
  std::vector<std::string> pool;
  for (const auto& c : vocab) pool.push_back(c.name());
  pool.insert(pool.end(), {"cat", "dog", "person", "traffic light"});
  const std::vector<std::string> prompts{"Find the shapes", "Where is the location of red circle",
                                         "Detect all objects in the image", "anything coloured"};

  textenc::LanguageCache<float> cache;
  std::set<std::string> seen_labels, seen_prompts;
  textenc::CacheStats predicted{};
  std::size_t mismatched = 0, counter_bad = 0;
  CounterRng rng(404);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::string> labels;
    for (const auto& p : pool)
      if (rng.bernoulli(0.3)) labels.push_back(p);
    if (labels.empty()) labels.push_back(pool[rng.below(pool.size())]);
    const std::string prompt =
        rng.bernoulli(0.5) ? prompts[rng.below(prompts.size())] : bench_cli::default_prompt(labels, cfg.text_max_len - 1);
    const auto scene = training::generate_synthetic_scene(rng.next_u64(), cfg.canvas, vocab);

    const auto on = det.detect(scene.image, labels, prompt, &cache);
    const auto off = det.detect(scene.image, labels, prompt, nullptr);
    mismatched += ela_decoder::detections_json(on) != ela_decoder::detections_json(off);

    for (const auto& l : labels) {
      if (seen_labels.insert(l).second) ++predicted.misses; else ++predicted.hits;
    }
    if (seen_prompts.insert(prompt).second) ++predicted.misses; else ++predicted.hits;
    predicted.entries = seen_labels.size() + seen_prompts.size();
    counter_bad += !(cache.stats() == predicted);
  }
  t.require(mismatched == 0, std::to_string(mismatched) + " of 50 outputs differ");
  t.require(counter_bad == 0, std::to_string(counter_bad) + " counter mismatches");
  const auto s = cache.stats();
  t.note("50 triples identical; hits " + std::to_string(s.hits) + ", misses " + std::to_string(s.misses) +
         ", entries " + std::to_string(s.entries) + " as predicted");
  return t.outcome();
}

Outcome cache_latency(const Scratch& w) {
  Tally t;
  std::stringstream out, err;
  bench_cli::BenchArgs a;
  a.image_dir = w.images.string();
  a.iters = 100;
  a.warmup = 5;
  bench_cli::ModuleTimings on, off;
  a.cache = true;
  a.out = w.path("latency_on.json");
  t.require(bench_cli::cmd_bench(a, out, err, &on) == bench_cli::kExitOk, "cache-on bench failed: " + err.str());
  a.cache = false;
  a.out = w.path("latency_off.json");
  t.require(bench_cli::cmd_bench(a, out, err, &off) == bench_cli::kExitOk, "cache-off bench failed: " + err.str());
  const double m_on = on.components[0].mean_ms, m_off = off.components[0].mean_ms;
  const double ratio = m_off > 0 ? m_on / m_off : INFINITY;
  t.require(ratio <= 0.05, "ratio " + fmt(ratio));
  t.note("text backbone " + fmt(m_on, "%.4f") + " ms cached vs " + fmt(m_off, "%.3f") + " ms uncached, ratio " +
         fmt(ratio, "%.4f"));
  return t.outcome();
}

// ---------------------------------------------------------------- training

Outcome toy_overfit(const Scratch& w, std::size_t steps) {
  Tally t;
  const auto start = std::chrono::steady_clock::now();
  bench_cli::TrainArgs a;
  a.steps = steps;
  a.eval = true;
  a.out = w.path("toy.otck");
  std::stringstream out, err;
  const int code = bench_cli::cmd_train(a, out, err);
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60.0;
  t.require(code == bench_cli::kExitOk, "cmd_train exit " + std::to_string(code) + ": " + err.str());
  double train_ap = -1, held_ap = -1;
  std::istringstream log(slurp(w.path("toy.otck.metrics.jsonl")));
  for (std::string line; std::getline(log, line);) {
    const auto j = nlohmann::json::parse(line);
    if (j.contains("eval")) {
      train_ap = j["eval"]["ap@0.5"].get<double>();
      held_ap = j["eval"]["heldout_ap@0.5"].get<double>();
    }
  }
  const bench_cli::ModelConfig cfg;
  t.require(train_ap >= 0.90, "train AP " + fmt(train_ap, "%.3f"));
  t.require(held_ap >= 0.60, "held-out AP " + fmt(held_ap, "%.3f"));
  t.require(minutes <= 60.0, "runtime " + fmt(minutes, "%.1f") + " min");
  t.note("d=" + std::to_string(cfg.d) + " L=" + std::to_string(cfg.layers) + " K_q=" +
         std::to_string(cfg.num_queries) + ", " + std::to_string(cfg.train_scenes) + " scenes, " +
         std::to_string(steps) + " steps: AP@0.5 train " + fmt(train_ap, "%.3f") + ", held-out " +
         fmt(held_ap, "%.3f") + " in " + fmt(minutes, "%.1f") + " min");
  return t.outcome();
}

Outcome determinism(const Scratch& w) {
  Tally t;
  std::stringstream out, err;
  bench_cli::TrainArgs a;
  a.steps = 30;
  a.seed = 7;
  for (const char* name : {"det_a.otck", "det_b.otck"}) {
    a.out = w.path(name);
    t.require(bench_cli::cmd_train(a, out, err) == bench_cli::kExitOk, std::string("train ") + name);
  }
  const std::string log = slurp(w.path("det_a.otck.metrics.jsonl"));
  t.require(!log.empty() && log == slurp(w.path("det_b.otck.metrics.jsonl")), "metrics logs differ");
  t.require(slurp(w.path("det_a.otck")) == slurp(w.path("det_b.otck")), "checkpoints differ");

  bench_cli::DetectArgs d;
  d.checkpoint = w.path("det_a.otck");
  d.image_dir = w.images.string();
  d.labels = "red circle,green square,blue triangle";
  for (const char* name : {"dets_a", "dets_b"}) {
    d.out = w.path(name);
    t.require(bench_cli::cmd_detect(d, out, err) == bench_cli::kExitOk, std::string("detect ") + name);
  }
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(w.root / "dets_a")) {
    ++files;
    t.require(slurp(e.path()) == slurp(w.root / "dets_b" / e.path().filename()),
              e.path().filename().string() + " differs");
  }
  t.require(files == 4, "expected 4 detection files");
  t.note("two 30-step runs gave identical metrics and checkpoints; " + std::to_string(files) +
         " detection files byte-identical");
  return t.outcome();
}

Outcome report_contract(const Scratch& w) {
  Tally t;
  std::stringstream out, err;
  bench_cli::BenchArgs a;
  a.image_dir = w.images.string();
  a.iters = 50;
  a.warmup = 5;
  a.out = w.path("report.json");
  bench_cli::ModuleTimings m;
  t.require(bench_cli::cmd_bench(a, out, err, &m) == bench_cli::kExitOk, "bench failed: " + err.str());
  const auto j = nlohmann::json::parse(slurp(w.path("report.json")));
  std::vector<std::string> keys;
  for (auto it = j["components"].begin(); it != j["components"].end(); ++it) keys.push_back(it.key());
  std::sort(keys.begin(), keys.end());
  t.require(keys == std::vector<std::string>{"decoder_head", "encoder_fpn", "image_backbone", "text_backbone"},
            "component keys");
  t.require(out.str().find("Text Backbone | Image Backbone | Encoder/FPN | Decoder/Head | Total") != std::string::npos,
            "table header");
  double sum = 0;
  for (const char* k : bench_cli::kComponents) sum += j["components"][k]["mean_ms"].get<double>();
  const double total = j["total"]["mean_ms"].get<double>();
  const double gap = std::abs(sum - total) / total;
  t.require(gap <= 0.05, "component sum off by " + fmt(100 * gap) + "%");
  t.note("components sum " + fmt(sum, "%.2f") + " ms vs total " + fmt(total, "%.2f") + " ms (" +
         fmt(100 * gap, "%.2f") + "%)");
  return t.outcome();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::size_t toy_steps = 4000;
  std::string workdir;
  app.add_option("criteria", only, "criteria to run (default: all)")->check(CLI::Range(1, 8));
  app.add_option("--toy-steps", toy_steps, "training steps for the toy overfit")->check(CLI::Range(1, 5000));
  app.add_option("--workdir", workdir, "scratch directory (default: a temporary one)");
  CLI11_PARSE(app, argc, argv);

  const bool keep = !workdir.empty();
  const fs::path base = keep ? fs::path(workdir)
                             : fs::temp_directory_path() / ("efh_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(base);
  const Scratch w(base);

  using Runner = std::function<Outcome()>;
  const std::vector<std::pair<std::string, Runner>> criteria{
      {"kernel oracles", kernel_oracles},
      {"gradient suite", gradient_suite},
      {"structural invariants", structural_invariants},
      {"language-cache equivalence", cache_equivalence},
      {"cache latency", [&] { return cache_latency(w); }},
      {"toy overfit", [&] { return toy_overfit(w, toy_steps); }},
      {"determinism", [&] { return determinism(w); }},
      {"timing report contract", [&] { return report_contract(w); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failed += !o.pass;
    std::cout << "criterion " << id << " " << criteria[i].first << ": " << (o.pass ? "PASS" : "FAIL") << " ["
              << fmt(secs, "%.1f") << " s] " << o.detail << std::endl;
  }
  if (!keep) fs::remove_all(base);
  return failed == 0 ? 0 : 1;
}
