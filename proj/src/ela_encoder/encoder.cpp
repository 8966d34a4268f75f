#include "efh/ela_encoder/encoder.hpp"

#include <cmath>

#include <algorithm>

#include "efh/numcore/kernels.hpp"

namespace efh::ela_encoder {

void EncoderConfig::validate() const {
  if (d == 0 || d % 4 != 0) throw ConfigError("encoder width must be a positive multiple of 4");
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("encoder width " + std::to_string(d) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (!(anchor_size > 0.0 && anchor_size < 0.25)) throw ConfigError("anchor_size must be in (0, 0.25)");
}

namespace {

const char* const kFuse[] = {"encoder.ccfm.td0", "encoder.ccfm.td1", "encoder.ccfm.bu0",
                             "encoder.ccfm.bu1"};

template <typename T>
Var<T> fuse(DiffContext<T>& ctx, const ParamStore<T>& store, const std::string& prefix, Var<T> a,
            Var<T> b) {
  Var<T> x = ops::concat<T>({a, b}, 2);
  x = ops::silu(layers::conv(ctx, store, prefix + ".c1", x, 1, 1, 0));
  return layers::conv(ctx, store, prefix + ".c3", x, 3, 1, 1);
}

template <typename T>
Var<T> flatten(Var<T> x) {
  return ops::reshape(x, {x.dim(0) * x.dim(1), x.dim(2)});
}

}  // namespace

template <typename T>
void init_encoder(ParamStore<T>& store, const Init& init, const EncoderConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d;
  layers::init_attention(store, init, "encoder.aifi.attn", d);
  layers::init_layer_norm(store, "encoder.aifi.ln1", d);
  layers::init_mlp(store, init, "encoder.aifi.ffn", d, 2 * d, d, 2);
  layers::init_layer_norm(store, "encoder.aifi.ln2", d);
  for (const char* p : kFuse) {
    layers::init_conv(store, init, std::string(p) + ".c1", 1, 2 * d, d);
    layers::init_conv(store, init, std::string(p) + ".c3", 3, d, d);
  }
  layers::init_conv(store, init, "encoder.ccfm.down0", 3, d, d);
  layers::init_conv(store, init, "encoder.ccfm.down1", 3, d, d);
  layers::init_mlp(store, init, "encoder.box_mlp", d, d, 4, 3);
  layers::init_linear(store, init, "head.label_proj", cfg.d_text, d, false);
}

template <typename T>
Tensor<T> sincos_position_2d(std::size_t h, std::size_t w, std::size_t d) {
  if (d % 4 != 0) throw ConfigError("positional width must be divisible by 4");
  const std::size_t q = d / 4;
  Tensor<T> out({h * w, d});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      T* row = out.raw() + (y * w + x) * d;
      for (std::size_t i = 0; i < q; ++i) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(q));
        row[i] = static_cast<T>(std::sin(x * omega));
        row[q + i] = static_cast<T>(std::cos(x * omega));
        row[2 * q + i] = static_cast<T>(std::sin(y * omega));
        row[3 * q + i] = static_cast<T>(std::cos(y * omega));
      }
    }
  }
  return out;
}

template <typename T>
Var<T> aifi(DiffContext<T>& ctx, const ParamStore<T>& store, const EncoderConfig& cfg, Var<T> p5,
            bool positional) {
  const std::size_t h = p5.dim(0), w = p5.dim(1);
  Var<T> x = flatten(p5);
  Var<T> qk = x;
  if (positional) qk = ops::add(x, ctx.constant(sincos_position_2d<T>(h, w, cfg.d)));
  const auto attn = layers::bind_attention(ctx, store, "encoder.aifi.attn");
  x = layers::layer_norm(ctx, store, "encoder.aifi.ln1",
                         ops::add(x, layers::multi_head_attention(qk, qk, x, attn, cfg.heads)));
  x = layers::layer_norm(ctx, store, "encoder.aifi.ln2",
                         ops::add(x, layers::mlp(ctx, store, "encoder.aifi.ffn", 2, x)));
  return ops::reshape(x, {h, w, cfg.d});
}

template <typename T>
Tensor<T> make_anchors(const std::vector<ops::LevelShape>& levels, double anchor_size,
                       std::vector<std::uint8_t>* scale) {
  std::size_t m = 0;
  for (const auto& l : levels) m += l.height * l.width;
  Tensor<T> anchors({m, 4});
  if (scale) scale->assign(m, 0);
  for (std::size_t s = 0; s < levels.size(); ++s) {
    const auto& l = levels[s];
    const T side = static_cast<T>(anchor_size * std::pow(2.0, static_cast<double>(s)));
    for (std::size_t y = 0; y < l.height; ++y) {
      for (std::size_t x = 0; x < l.width; ++x) {
        const std::size_t i = l.start + y * l.width + x;
        anchors.at(i, 0) = static_cast<T>((x + 0.5) / static_cast<double>(l.width));
        anchors.at(i, 1) = static_cast<T>((y + 0.5) / static_cast<double>(l.height));
        anchors.at(i, 2) = side;
        anchors.at(i, 3) = side;
        if (scale) (*scale)[i] = static_cast<std::uint8_t>(s);
      }
    }
  }
  return anchors;
}

template <typename T>
EncodedFeatures<T> ccfm(DiffContext<T>& ctx, const ParamStore<T>& store, const EncoderConfig& cfg,
                        Var<T> p3, Var<T> p4, Var<T> f5) {
  if (p4.dim(0) * 2 != p3.dim(0) || f5.dim(0) * 2 != p4.dim(0) || p4.dim(1) * 2 != p3.dim(1) ||
      f5.dim(1) * 2 != p4.dim(1)) {
    throw DimensionError("ccfm: pyramid scales are not in 2x ratios");
  }
  // top-down
  const Var<T> td4 = fuse(ctx, store, kFuse[1], ops::upsample2x(f5), p4);
  const Var<T> out3 = fuse(ctx, store, kFuse[0], ops::upsample2x(td4), p3);
  // bottom-up
  const Var<T> out4 =
      fuse(ctx, store, kFuse[2], layers::conv(ctx, store, "encoder.ccfm.down0", out3, 3, 2, 1), td4);
  const Var<T> out5 =
      fuse(ctx, store, kFuse[3], layers::conv(ctx, store, "encoder.ccfm.down1", out4, 3, 2, 1), f5);

  EncodedFeatures<T> enc;
  std::size_t start = 0;
  for (const Var<T>& v : {out3, out4, out5}) {
    enc.levels.push_back({v.dim(0), v.dim(1), start});
    start += v.dim(0) * v.dim(1);
  }
  enc.memory = ops::concat<T>({flatten(out3), flatten(out4), flatten(out5)}, 0);
  enc.anchors = make_anchors<T>(enc.levels, cfg.anchor_size, &enc.scale);
  return enc;
}

template <typename T>
Var<T> predict_candidate_boxes(DiffContext<T>& ctx, const ParamStore<T>& store,
                               const EncodedFeatures<T>& enc) {
  const Var<T> delta = layers::mlp(ctx, store, "encoder.box_mlp", 3, enc.memory);
  return ops::box_refine(ctx.constant(enc.anchors), delta);
}

template <typename T>
Var<T> project_labels(DiffContext<T>& ctx, const ParamStore<T>& store, Var<T> labels) {
  return ops::matmul(labels, store.var(ctx, "head.label_proj.w"));
}

template <typename T>
Tensor<T> relevance_scores(const Tensor<T>& memory, const Tensor<T>& projected_labels) {
  if (memory.rank() != 2 || projected_labels.rank() != 2 ||
      memory.dim(1) != projected_labels.dim(1)) {
    throw DimensionError("relevance_scores: " + shape_str(memory.shape()) + " vs " +
                         shape_str(projected_labels.shape()));
  }
  if (projected_labels.dim(0) == 0) throw ArgumentError("relevance_scores: no labels");
  static constexpr double kEps = 1e-8;
  const std::size_t m = memory.dim(0), k = projected_labels.dim(0), d = memory.dim(1);
  auto normalized = [d](const Tensor<T>& t) {
    Tensor<T> out = t;
    for (std::size_t r = 0; r < t.dim(0); ++r) {
      double n = 0;
      for (std::size_t c = 0; c < d; ++c) n += static_cast<double>(t.at(r, c)) * t.at(r, c);
      const double inv = 1.0 / std::max(std::sqrt(n), kEps);
      for (std::size_t c = 0; c < d; ++c) out.at(r, c) = static_cast<T>(t.at(r, c) * inv);
    }
    return out;
  };
  const Tensor<T> o = normalized(memory);
  const Tensor<T> e = normalized(projected_labels);
  Tensor<T> alpha({m});
  for (std::size_t i = 0; i < m; ++i) {
    T best = T(-1);
    for (std::size_t j = 0; j < k; ++j) {
      T dot = 0;
      for (std::size_t c = 0; c < d; ++c) dot += o.at(i, c) * e.at(j, c);
      best = std::max(best, dot);
    }
    alpha[i] = std::clamp(best, T(-1), T(1));
  }
  return alpha;
}

template <typename T>
QueryProposals<T> select_queries(DiffContext<T>& ctx, Var<T> boxes, const Tensor<T>& relevance,
                                 std::size_t k) {
  if (relevance.numel() != boxes.dim(0)) throw DimensionError("select_queries: size mismatch");
  QueryProposals<T> out;
  out.indices = ctx.decide(kernels::top_k<T>(relevance.data(), k));
  out.boxes = ops::gather_rows(boxes, out.indices);
  return out;
}

#define EFH_INSTANTIATE(T)                                                                      \
  template void init_encoder<T>(ParamStore<T>&, const Init&, const EncoderConfig&);            \
  template Tensor<T> sincos_position_2d<T>(std::size_t, std::size_t, std::size_t);             \
  template Var<T> aifi<T>(DiffContext<T>&, const ParamStore<T>&, const EncoderConfig&, Var<T>, \
                          bool);                                                               \
  template EncodedFeatures<T> ccfm<T>(DiffContext<T>&, const ParamStore<T>&,                   \
                                      const EncoderConfig&, Var<T>, Var<T>, Var<T>);           \
  template Tensor<T> make_anchors<T>(const std::vector<ops::LevelShape>&, double,              \
                                     std::vector<std::uint8_t>*);                              \
  template Var<T> predict_candidate_boxes<T>(DiffContext<T>&, const ParamStore<T>&,           \
                                             const EncodedFeatures<T>&);                       \
  template Var<T> project_labels<T>(DiffContext<T>&, const ParamStore<T>&, Var<T>);            \
  template Tensor<T> relevance_scores<T>(const Tensor<T>&, const Tensor<T>&);                  \
  template QueryProposals<T> select_queries<T>(DiffContext<T>&, Var<T>, const Tensor<T>&,      \
                                               std::size_t);
EFH_INSTANTIATE(float)
EFH_INSTANTIATE(double)
#undef EFH_INSTANTIATE

}  // namespace efh::ela_encoder
