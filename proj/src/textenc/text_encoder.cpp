#include "efh/textenc/text_encoder.hpp"

#include <cmath>

namespace efh::textenc {

void TextConfig::validate() const {
  if (d_text == 0 || heads == 0 || d_text % heads != 0) {
    throw ConfigError("text width " + std::to_string(d_text) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (max_len < 2) throw ConfigError("text max_len must be at least 2");
}

namespace {

std::string layer_prefix(std::size_t i) { return "text.layer" + std::to_string(i); }

}  // namespace

template <typename T>
void init_text_encoder(ParamStore<T>& store, const Init& init, const TextConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_text;
  store.add("text.tok_emb", init.uniform<T>("text.tok_emb", {kVocabSize, d}, std::sqrt(3.0)));
  store.add("text.pos_emb", init.uniform<T>("text.pos_emb", {cfg.max_len, d}, 0.5));
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const std::string p = layer_prefix(i);
    layers::init_attention(store, init, p + ".attn", d);
    layers::init_layer_norm(store, p + ".ln1", d);
    layers::init_mlp(store, init, p + ".ffn", d, 2 * d, d, 2);
    layers::init_layer_norm(store, p + ".ln2", d);
  }
  apply_text_freeze(store, cfg);
}

template <typename T>
void apply_text_freeze(ParamStore<T>& store, const TextConfig& cfg) {
  store.set_trainable_prefix("text.", true);
  if (cfg.frozen_layers == 0) return;
  store.set_trainable_prefix("text.tok_emb", false);
  store.set_trainable_prefix("text.pos_emb", false);
  for (std::size_t i = 0; i < std::min(cfg.frozen_layers, cfg.layers); ++i) {
    store.set_trainable_prefix(layer_prefix(i) + ".", false);
  }
}

template <typename T>
Var<T> encode_tokens(DiffContext<T>& ctx, const ParamStore<T>& store, const TextConfig& cfg,
                     const std::vector<std::size_t>& tokens) {
  if (tokens.empty() || tokens.size() > cfg.max_len) {
    throw ArgumentError("token sequence length " + std::to_string(tokens.size()) +
                        " outside [1, " + std::to_string(cfg.max_len) + "]");
  }
  for (std::size_t t : tokens) {
    if (t >= kVocabSize) throw ArgumentError("token id " + std::to_string(t) + " out of range");
  }
  Var<T> x = ops::gather_rows(store.var(ctx, "text.tok_emb"), tokens);
  x = ops::add(x, ops::slice(store.var(ctx, "text.pos_emb"), 0, 0, tokens.size()));
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const std::string p = layer_prefix(i);
    const auto attn = layers::bind_attention(ctx, store, p + ".attn");
    x = layers::layer_norm(ctx, store, p + ".ln1",
                           ops::add(x, layers::multi_head_self_attention(x, attn, cfg.heads)));
    x = layers::layer_norm(ctx, store, p + ".ln2",
                           ops::add(x, layers::mlp(ctx, store, p + ".ffn", 2, x)));
  }
  return x;
}

template <typename T>
Var<T> label_features(DiffContext<T>& ctx, const ParamStore<T>& store, const TextConfig& cfg,
                      const std::vector<std::string>& labels) {
  if (labels.empty()) throw ArgumentError("label list is empty");
  std::vector<Var<T>> rows;
  rows.reserve(labels.size());
  for (const auto& l : labels) {
    rows.push_back(ops::slice(encode_tokens(ctx, store, cfg, tokenize(l, cfg.max_len)), 0, 0, 1));
  }
  return ops::concat(rows, 0);
}

template <typename T>
Var<T> prompt_features(DiffContext<T>& ctx, const ParamStore<T>& store, const TextConfig& cfg,
                       const std::string& prompt) {
  return encode_tokens(ctx, store, cfg, tokenize(prompt, cfg.max_len));
}

namespace {

template <typename T>
Tensor<T> compute_label(const ParamStore<T>& store, const TextConfig& cfg, const std::string& l) {
  DiffContext<T> ctx(false);
  const Tensor<T>& rows = encode_tokens(ctx, store, cfg, tokenize(l, cfg.max_len)).value();
  return rows.rows(0, 1).reshaped({cfg.d_text});
}

template <typename T>
Tensor<T> compute_prompt(const ParamStore<T>& store, const TextConfig& cfg, const std::string& p) {
  DiffContext<T> ctx(false);
  return prompt_features(ctx, store, cfg, p).value();
}

}  // namespace

template <typename T>
LabelEmbeddings<T> encode_labels(const ParamStore<T>& store, const TextConfig& cfg,
                                 const std::vector<std::string>& labels, LanguageCache<T>* cache) {
  if (labels.empty()) throw ArgumentError("label list is empty");
  LabelEmbeddings<T> out;
  out.names = labels;
  out.embeddings = Tensor<T>({labels.size(), cfg.d_text});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!has_content(labels[i])) throw ArgumentError("label " + std::to_string(i) + " is empty");
    auto compute = [&] { return compute_label(store, cfg, labels[i]); };
    Tensor<T> row = cache ? *cache->get_or_compute(Role::label, labels[i], compute) : compute();
    if (row.numel() != cfg.d_text) throw DimensionError("cached label width mismatch");
    std::copy(row.data().begin(), row.data().end(), out.embeddings.raw() + i * cfg.d_text);
  }
  return out;
}

template <typename T>
PromptEncoding<T> encode_prompt(const ParamStore<T>& store, const TextConfig& cfg,
                                const std::string& prompt, LanguageCache<T>* cache) {
  if (!has_content(prompt)) throw ArgumentError("prompt is empty");
  auto compute = [&] { return compute_prompt(store, cfg, prompt); };
  PromptEncoding<T> out;
  out.embeddings = cache ? *cache->get_or_compute(Role::prompt, prompt, compute) : compute();
  if (out.embeddings.rank() != 2 || out.embeddings.dim(1) != cfg.d_text) {
    throw DimensionError("cached prompt width mismatch");
  }
  out.valid.assign(out.embeddings.dim(0), 1);
  return out;
}

#define EFH_INSTANTIATE(T)                                                                      \
  template void init_text_encoder<T>(ParamStore<T>&, const Init&, const TextConfig&);          \
  template void apply_text_freeze<T>(ParamStore<T>&, const TextConfig&);                       \
  template Var<T> encode_tokens<T>(DiffContext<T>&, const ParamStore<T>&, const TextConfig&,   \
                                   const std::vector<std::size_t>&);                           \
  template Var<T> label_features<T>(DiffContext<T>&, const ParamStore<T>&, const TextConfig&,  \
                                    const std::vector<std::string>&);                          \
  template Var<T> prompt_features<T>(DiffContext<T>&, const ParamStore<T>&, const TextConfig&, \
                                     const std::string&);                                      \
  template LabelEmbeddings<T> encode_labels<T>(const ParamStore<T>&, const TextConfig&,        \
                                               const std::vector<std::string>&,                \
                                               LanguageCache<T>*);                             \
  template PromptEncoding<T> encode_prompt<T>(const ParamStore<T>&, const TextConfig&,         \
                                              const std::string&, LanguageCache<T>*);
EFH_INSTANTIATE(float)
EFH_INSTANTIATE(double)
#undef EFH_INSTANTIATE

}  // namespace efh::textenc
