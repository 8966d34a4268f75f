#include "efh/ela_decoder/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace efh::ela_decoder {

void DecoderConfig::validate() const {
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("decoder width " + std::to_string(d) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (points == 0) throw ConfigError("decoder points must be positive");
  if (levels != 3) throw ConfigError("decoder levels must be 3");
  if (num_queries == 0) throw ConfigError("num_queries must be positive");
  if (!(score_threshold >= 0.0 && score_threshold <= 1.0)) {
    throw ConfigError("score_threshold must be in [0, 1]");
  }
}

namespace {

std::string layer_prefix(std::size_t l) { return "decoder.layer" + std::to_string(l); }

template <typename T>
void init_deform(ParamStore<T>& store, const Init& init, const std::string& prefix,
                 const DecoderConfig& cfg) {
  const std::size_t h = cfg.heads, L = cfg.levels, P = cfg.points, d = cfg.d;
  // zero weights; biases spread the points radially inside the box, one
  // direction per head
  store.add(prefix + ".offsets.w", Tensor<T>({d, h * L * P * 2}));
  Tensor<T> bias({h * L * P * 2});
  for (std::size_t k = 0; k < h; ++k) {
    const double theta = 2.0 * M_PI * static_cast<double>(k) / static_cast<double>(h);
    double dx = std::cos(theta), dy = std::sin(theta);
    const double m = std::max(std::abs(dx), std::abs(dy));
    dx /= m;
    dy /= m;
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t p = 0; p < P; ++p) {
        const double r = static_cast<double>(p + 1) / static_cast<double>(P);
        const std::size_t i = ((k * L + l) * P + p) * 2;
        bias[i] = static_cast<T>(dx * r);
        bias[i + 1] = static_cast<T>(dy * r);
      }
    }
  }
  store.add(prefix + ".offsets.b", std::move(bias));
  store.add(prefix + ".weights.w", Tensor<T>({d, h * L * P}));
  store.add(prefix + ".weights.b", Tensor<T>({h * L * P}));
  layers::init_linear(store, init, prefix + ".value", d, d);
  layers::init_linear(store, init, prefix + ".out", d, d);
}

}  // namespace

template <typename T>
void init_decoder(ParamStore<T>& store, const Init& init, const DecoderConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d;
  store.add("decoder.query_embed",
            init.uniform<T>("decoder.query_embed", {cfg.num_queries, d}, 1.0 / std::sqrt(double(d))));
  layers::init_linear(store, init, "decoder.prompt_proj", cfg.d_text, d);
  layers::init_linear(store, init, "decoder.dn_content", cfg.d_text, d);
  layers::init_mlp(store, init, "decoder.qpos", 4, 2 * d, d, 2);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = layer_prefix(l);
    layers::init_attention(store, init, p + ".self_attn", d);
    layers::init_layer_norm(store, p + ".ln_q", d);
    layers::init_layer_norm(store, p + ".ln_p", d);
    init_deform(store, init, p + ".deform", cfg);
    layers::init_layer_norm(store, p + ".ln_cross", d);
    layers::init_mlp(store, init, p + ".ffn", d, 4 * d, d, 2);
    layers::init_layer_norm(store, p + ".ln_ffn", d);
    layers::init_mlp(store, init, p + ".box_mlp", d, d, 4, 3);
  }
}

AttentionMask build_dn_mask(std::size_t k_q, std::size_t groups, std::size_t per_group,
                            std::size_t t) {
  const std::size_t dn = groups * per_group;
  const std::size_t n = dn + k_q + t;
  std::vector<std::uint8_t> allow(n * n, 0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      bool ok;
      if (r < dn) {
        ok = c < dn && c / per_group == r / per_group;
      } else {
        ok = c >= dn;
      }
      allow[r * n + c] = ok;
    }
  }
  return AttentionMask(n, n, std::move(allow));
}

template <typename T>
Var<T> deformable_attention(DiffContext<T>& ctx, const ParamStore<T>& store,
                            const std::string& prefix, const DecoderConfig& cfg, Var<T> query,
                            Var<T> refs, const ela_encoder::EncodedFeatures<T>& enc) {
  const std::size_t n = query.dim(0), h = cfg.heads, L = cfg.levels, P = cfg.points;
  if (enc.levels.size() != L) throw DimensionError("deformable_attention: level count mismatch");
  const Var<T> offsets = layers::linear(ctx, store, prefix + ".offsets", query);
  Var<T> weights = layers::linear(ctx, store, prefix + ".weights", query);
  weights = ops::softmax(ops::reshape(weights, {n, h, L * P}), 2);
  weights = ops::reshape(weights, {n, h, L, P});
  const Var<T> locations = ops::box_sampling_locations(refs, offsets, h, L, P);
  const Var<T> value = layers::linear(ctx, store, prefix + ".value", enc.memory);
  const Var<T> sampled = ops::deform_sample(value, enc.levels, locations, weights, h);
  return layers::linear(ctx, store, prefix + ".out", sampled);
}

template <typename T>
QueryState<T> decoder_layer(DiffContext<T>& ctx, const ParamStore<T>& store,
                            const DecoderConfig& cfg, std::size_t layer, const QueryState<T>& in,
                            const ela_encoder::EncodedFeatures<T>& enc, const AttentionMask& mask,
                            bool refs_detached) {
  const std::size_t n = in.q.dim(0), t = in.p.dim(0);
  if (mask.rows() != n + t || mask.cols() != n + t) {
    throw ArgumentError("decoder_layer: mask is " + std::to_string(mask.rows()) + "x" +
                        std::to_string(mask.cols()) + ", expected " + std::to_string(n + t));
  }
  const std::string p = layer_prefix(layer);
  const Var<T> fixed_refs = ctx.detach(in.boxes);
  const Var<T> refine_from = refs_detached ? fixed_refs : in.boxes;
  const Var<T> qpos = layers::mlp(ctx, store, "decoder.qpos", 2, fixed_refs);

  // self-attention over [Q; P]
  const Var<T> qk = ops::concat<T>({ops::add(in.q, qpos), in.p}, 0);
  const Var<T> v = ops::concat<T>({in.q, in.p}, 0);
  const auto attn = layers::bind_attention(ctx, store, p + ".self_attn");
  const Var<T> mixed = layers::multi_head_attention(qk, qk, v, attn, cfg.heads, &mask);
  QueryState<T> out;
  Var<T> q = layers::layer_norm(ctx, store, p + ".ln_q", ops::add(in.q, ops::slice(mixed, 0, 0, n)));
  out.p = layers::layer_norm(ctx, store, p + ".ln_p", ops::add(in.p, ops::slice(mixed, 0, n, n + t)));

  // deformable cross-attention into O
  const Var<T> cross =
      deformable_attention(ctx, store, p + ".deform", cfg, ops::add(q, qpos), fixed_refs, enc);
  q = layers::layer_norm(ctx, store, p + ".ln_cross", ops::add(q, cross));

  // feed-forward
  q = layers::layer_norm(ctx, store, p + ".ln_ffn", ops::add(q, layers::mlp(ctx, store, p + ".ffn", 2, q)));
  out.q = q;
  out.boxes = ops::box_refine(refine_from, layers::mlp(ctx, store, p + ".box_mlp", 3, q));
  return out;
}

template <typename T>
Var<T> classify(Var<T> queries, Var<T> projected_labels) {
  if (queries.dim(1) != projected_labels.dim(1)) {
    throw DimensionError("classify: query width " + std::to_string(queries.dim(1)) +
                         " vs label width " + std::to_string(projected_labels.dim(1)));
  }
  const T scale = T(1) / std::sqrt(static_cast<T>(queries.dim(1)));
  return ops::scale(ops::matmul(queries, ops::transpose(projected_labels)), scale);
}

template <typename T>
DecoderOutput<T> run_decoder(DiffContext<T>& ctx, const ParamStore<T>& store,
                             const DecoderConfig& cfg, Var<T> proposals, Var<T> prompt_features,
                             Var<T> projected_labels, const ela_encoder::EncodedFeatures<T>& enc,
                             const DnQueries<T>* dn) {
  const std::size_t k = proposals.dim(0);
  Var<T> q = store.var(ctx, "decoder.query_embed");
  if (q.dim(0) != k) {
    throw DimensionError("run_decoder: " + std::to_string(k) + " proposals for " +
                         std::to_string(q.dim(0)) + " learned queries");
  }
  QueryState<T> state;
  state.q = q;
  state.boxes = proposals;
  state.p = layers::linear(ctx, store, "decoder.prompt_proj", prompt_features);
  DecoderOutput<T> out;
  std::size_t groups = 0, per_group = 0;
  if (dn && dn->count() > 0) {
    groups = dn->groups;
    per_group = dn->per_group;
    out.dn_count = dn->count();
    state.q = ops::concat<T>({dn->content, q}, 0);
    state.boxes = ops::concat<T>({ctx.constant(dn->boxes), proposals}, 0);
  }
  const AttentionMask mask = build_dn_mask(k, groups, per_group, state.p.dim(0));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    state = decoder_layer(ctx, store, cfg, l, state, enc, mask, l > 0);
    out.layers.push_back({state.boxes, classify(state.q, projected_labels)});
  }
  return out;
}

template <typename T>
DetectionSet collect_detections(const DecoderOutput<T>& out, double threshold) {
  DetectionSet set;
  if (out.layers.empty()) return set;
  const Tensor<T>& logits = out.layers.back().logits.value();
  const Tensor<T>& boxes = out.layers.back().boxes.value();
  const std::size_t k = logits.dim(1);
  for (std::size_t i = out.dn_count; i < logits.dim(0); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    }
    const double x = static_cast<double>(logits.at(i, best));
    const double score = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    if (score < threshold) continue;
    Detection det;
    for (int c = 0; c < 4; ++c) det.box[c] = static_cast<double>(boxes.at(i, c));
    det.label = best;
    det.score = score;
    det.query = i - out.dn_count;
    set.detections.push_back(det);
  }
  std::stable_sort(set.detections.begin(), set.detections.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return set;
}

namespace {

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (unsigned char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default:
        if (c < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof buf, "\\u%04x", c);
          out += buf;
        } else {
          out += static_cast<char>(c);
        }
    }
  }
  return out + "\"";
}

std::string fixed6(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  std::string s = buf;
  if (s == "-0.000000") s = "0.000000";
  return s;
}

}  // namespace

std::string detections_json(const DetectionSet& set) {
  std::string out = "{\"image\": " + quote(set.image) + ", \"prompt\": " + quote(set.prompt) +
                    ", \"detections\": [";
  for (std::size_t i = 0; i < set.detections.size(); ++i) {
    const Detection& d = set.detections[i];
    if (d.label >= set.labels.size()) throw ArgumentError("detection label index out of range");
    if (i) out += ", ";
    out += "{\"bbox\": [" + fixed6(d.box[0]) + ", " + fixed6(d.box[1]) + ", " + fixed6(d.box[2]) +
           ", " + fixed6(d.box[3]) + "], \"score\": " + fixed6(d.score) +
           ", \"label\": " + quote(set.labels[d.label]) + "}";
  }
  return out + "]}\n";
}

#define EFH_INSTANTIATE(T)                                                                       \
  template void init_decoder<T>(ParamStore<T>&, const Init&, const DecoderConfig&);             \
  template Var<T> deformable_attention<T>(DiffContext<T>&, const ParamStore<T>&,                \
                                          const std::string&, const DecoderConfig&, Var<T>,     \
                                          Var<T>, const ela_encoder::EncodedFeatures<T>&);      \
  template QueryState<T> decoder_layer<T>(DiffContext<T>&, const ParamStore<T>&,                \
                                          const DecoderConfig&, std::size_t,                    \
                                          const QueryState<T>&,                                 \
                                          const ela_encoder::EncodedFeatures<T>&,               \
                                          const AttentionMask&, bool);                          \
  template Var<T> classify<T>(Var<T>, Var<T>);                                                  \
  template DecoderOutput<T> run_decoder<T>(DiffContext<T>&, const ParamStore<T>&,               \
                                           const DecoderConfig&, Var<T>, Var<T>, Var<T>,        \
                                           const ela_encoder::EncodedFeatures<T>&,              \
                                           const DnQueries<T>*);                                \
  template DetectionSet collect_detections<T>(const DecoderOutput<T>&, double);
EFH_INSTANTIATE(float)
EFH_INSTANTIATE(double)
#undef EFH_INSTANTIATE

}  // namespace efh::ela_decoder
