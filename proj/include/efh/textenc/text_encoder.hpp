#pragma once

#include <string>
#include <vector>

#include "efh/numcore/layers.hpp"
#include "efh/textenc/language_cache.hpp"
#include "efh/textenc/tokenizer.hpp"

// Tiny byte-level transformer text encoder. Parameters live under "text.":
//   text.tok_emb [vocab, d_text], text.pos_emb [max_len, d_text],
//   text.layer<i>.{attn,ln1,ffn,ln2}

namespace efh::textenc {

struct TextConfig {
  std::size_t d_text = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t max_len = 64;
  /// The token embeddings and the first `frozen_layers` layers stay fixed
  /// during training.
  std::size_t frozen_layers = 1;

  void validate() const;
  bool fully_frozen() const { return frozen_layers >= layers; }
};

/// Token-level prompt features e(p).
template <typename T>
struct PromptEncoding {
  Tensor<T> embeddings;               // [T, d_text]
  std::vector<std::uint8_t> valid;    // one flag per row
};

/// Sentence-level label features e(l), one [cls] row per label.
template <typename T>
struct LabelEmbeddings {
  Tensor<T> embeddings;               // [K_lbl, d_text]
  std::vector<std::string> names;
};

template <typename T>
void init_text_encoder(ParamStore<T>& store, const Init& init, const TextConfig& cfg);

/// Applies the freeze flags of `cfg` to the "text." parameters.
template <typename T>
void apply_text_freeze(ParamStore<T>& store, const TextConfig& cfg);

/// All output rows [len(tokens), d_text] for one token sequence.
template <typename T>
Var<T> encode_tokens(DiffContext<T>& ctx, const ParamStore<T>& store, const TextConfig& cfg,
                     const std::vector<std::size_t>& tokens);

/// In-graph label features [K_lbl, d_text]; each label encoded on its own.
template <typename T>
Var<T> label_features(DiffContext<T>& ctx, const ParamStore<T>& store, const TextConfig& cfg,
                      const std::vector<std::string>& labels);

/// In-graph prompt features [T, d_text].
template <typename T>
Var<T> prompt_features(DiffContext<T>& ctx, const ParamStore<T>& store, const TextConfig& cfg,
                       const std::string& prompt);

/// Label embeddings, consulting `cache` per label when given.
template <typename T>
LabelEmbeddings<T> encode_labels(const ParamStore<T>& store, const TextConfig& cfg,
                                 const std::vector<std::string>& labels,
                                 LanguageCache<T>* cache = nullptr);

/// Prompt embeddings, cached by the whole prompt string when `cache` is given.
template <typename T>
PromptEncoding<T> encode_prompt(const ParamStore<T>& store, const TextConfig& cfg,
                                const std::string& prompt, LanguageCache<T>* cache = nullptr);

}  // namespace efh::textenc
