#pragma once

#include <string>
#include <vector>

#include "efh/numcore/mask.hpp"
#include "efh/numcore/ops.hpp"
#include "efh/numcore/params.hpp"

// Parameterized building blocks shared by the text encoder, the hybrid
// encoder and the decoder. Parameters live in a ParamStore under a prefix:
//   <prefix>.w / <prefix>.b                       linear
//   <prefix>.{q,k,v,o}.{w,b}                      multi-head attention
//   <prefix>.gamma / <prefix>.beta                layer norm
//   <prefix>.{0,1,...}.{w,b}                      MLP layers

namespace efh::layers {

template <typename T>
void init_linear(ParamStore<T>& store, const Init& init, const std::string& prefix,
                 std::size_t in, std::size_t out, bool bias = true);

template <typename T>
void init_layer_norm(ParamStore<T>& store, const std::string& prefix, std::size_t d);

template <typename T>
void init_attention(ParamStore<T>& store, const Init& init, const std::string& prefix,
                    std::size_t d);

/// Convolution weights [k*k*in, out] and bias [out].
template <typename T>
void init_conv(ParamStore<T>& store, const Init& init, const std::string& prefix,
               std::size_t kernel, std::size_t in, std::size_t out);

/// Layers: in -> hidden (x depth-1) -> out.
template <typename T>
void init_mlp(ParamStore<T>& store, const Init& init, const std::string& prefix,
              std::size_t in, std::size_t hidden, std::size_t out, std::size_t depth);

template <typename T>
Var<T> linear(DiffContext<T>& ctx, const ParamStore<T>& store, const std::string& prefix,
              Var<T> x);

template <typename T>
Var<T> layer_norm(DiffContext<T>& ctx, const ParamStore<T>& store, const std::string& prefix,
                  Var<T> x);

template <typename T>
Var<T> conv(DiffContext<T>& ctx, const ParamStore<T>& store, const std::string& prefix, Var<T> x,
            std::size_t kernel, std::size_t stride, std::size_t pad);

/// GELU between layers, none after the last.
template <typename T>
Var<T> mlp(DiffContext<T>& ctx, const ParamStore<T>& store, const std::string& prefix,
           std::size_t depth, Var<T> x);

/// Projection weights of one multi-head attention block.
template <typename T>
struct AttentionWeights {
  Var<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
AttentionWeights<T> bind_attention(DiffContext<T>& ctx, const ParamStore<T>& store,
                                   const std::string& prefix);

/// Multi-head attention with separate query/key/value inputs:
/// OutProj(Attn(QProj(q_in), KProj(k_in), VProj(v_in))).
template <typename T>
Var<T> multi_head_attention(Var<T> q_in, Var<T> k_in, Var<T> v_in, const AttentionWeights<T>& w,
                            std::size_t heads, const AttentionMask* mask = nullptr,
                            Tensor<T>* weights_out = nullptr);

/// Self-attention of X[n, d] over its own rows.
template <typename T>
Var<T> multi_head_self_attention(Var<T> x, const AttentionWeights<T>& w, std::size_t heads,
                                 const AttentionMask* mask = nullptr,
                                 Tensor<T>* weights_out = nullptr);

}  // namespace efh::layers
