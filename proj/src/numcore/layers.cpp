#include "efh/numcore/layers.hpp"

namespace efh::layers {

template <typename T>
void init_linear(ParamStore<T>& store, const Init& init, const std::string& prefix,
                 std::size_t in, std::size_t out, bool bias) {
  store.add(prefix + ".w", init.fan_in<T>(prefix + ".w", {in, out}, in));
  if (bias) store.add(prefix + ".b", Tensor<T>({out}));
}

template <typename T>
void init_conv(ParamStore<T>& store, const Init& init, const std::string& prefix,
               std::size_t kernel, std::size_t in, std::size_t out) {
  const std::size_t fan = kernel * kernel * in;
  store.add(prefix + ".w", init.fan_in<T>(prefix + ".w", {fan, out}, fan));
  store.add(prefix + ".b", Tensor<T>({out}));
}

template <typename T>
Var<T> conv(DiffContext<T>& ctx, const ParamStore<T>& store, const std::string& prefix, Var<T> x,
            std::size_t kernel, std::size_t stride, std::size_t pad) {
  return ops::conv2d(x, store.var(ctx, prefix + ".w"), store.var(ctx, prefix + ".b"), kernel,
                     stride, pad);
}

template <typename T>
void init_layer_norm(ParamStore<T>& store, const std::string& prefix, std::size_t d) {
  store.add(prefix + ".gamma", Tensor<T>({d}, T(1)));
  store.add(prefix + ".beta", Tensor<T>({d}));
}

template <typename T>
void init_attention(ParamStore<T>& store, const Init& init, const std::string& prefix,
                    std::size_t d) {
  for (const char* part : {"q", "k", "v", "o"}) {
    init_linear(store, init, prefix + "." + part, d, d);
  }
}

template <typename T>
void init_mlp(ParamStore<T>& store, const Init& init, const std::string& prefix,
              std::size_t in, std::size_t hidden, std::size_t out, std::size_t depth) {
  for (std::size_t i = 0; i < depth; ++i) {
    const std::size_t a = i == 0 ? in : hidden;
    const std::size_t b = i + 1 == depth ? out : hidden;
    init_linear(store, init, prefix + "." + std::to_string(i), a, b);
  }
}

template <typename T>
Var<T> linear(DiffContext<T>& ctx, const ParamStore<T>& store, const std::string& prefix,
              Var<T> x) {
  const std::string b = prefix + ".b";
  return ops::linear(x, store.var(ctx, prefix + ".w"),
                     store.contains(b) ? store.var(ctx, b) : Var<T>{});
}

template <typename T>
Var<T> layer_norm(DiffContext<T>& ctx, const ParamStore<T>& store, const std::string& prefix,
                  Var<T> x) {
  return ops::layer_norm(x, store.var(ctx, prefix + ".gamma"), store.var(ctx, prefix + ".beta"));
}

template <typename T>
Var<T> mlp(DiffContext<T>& ctx, const ParamStore<T>& store, const std::string& prefix,
           std::size_t depth, Var<T> x) {
  for (std::size_t i = 0; i < depth; ++i) {
    x = linear(ctx, store, prefix + "." + std::to_string(i), x);
    if (i + 1 < depth) x = ops::gelu(x);
  }
  return x;
}

template <typename T>
AttentionWeights<T> bind_attention(DiffContext<T>& ctx, const ParamStore<T>& store,
                                   const std::string& prefix) {
  auto v = [&](const char* part, const char* kind) {
    return store.var(ctx, prefix + "." + part + "." + kind);
  };
  return {v("q", "w"), v("q", "b"), v("k", "w"), v("k", "b"),
          v("v", "w"), v("v", "b"), v("o", "w"), v("o", "b")};
}

template <typename T>
Var<T> multi_head_attention(Var<T> q_in, Var<T> k_in, Var<T> v_in, const AttentionWeights<T>& w,
                            std::size_t heads, const AttentionMask* mask, Tensor<T>* weights_out) {
  const Var<T> q = ops::linear(q_in, w.wq, w.bq);
  const Var<T> k = ops::linear(k_in, w.wk, w.bk);
  const Var<T> v = ops::linear(v_in, w.wv, w.bv);
  const Var<T> a = ops::attention(q, k, v, heads, mask, weights_out);
  return ops::linear(a, w.wo, w.bo);
}

template <typename T>
Var<T> multi_head_self_attention(Var<T> x, const AttentionWeights<T>& w, std::size_t heads,
                                 const AttentionMask* mask, Tensor<T>* weights_out) {
  return multi_head_attention(x, x, x, w, heads, mask, weights_out);
}

#define EFH_INSTANTIATE_LAYERS(T)                                                               \
  template void init_linear<T>(ParamStore<T>&, const Init&, const std::string&, std::size_t,    \
                               std::size_t, bool);                                              \
  template void init_layer_norm<T>(ParamStore<T>&, const std::string&, std::size_t);            \
  template void init_conv<T>(ParamStore<T>&, const Init&, const std::string&, std::size_t,      \
                             std::size_t, std::size_t);                                         \
  template Var<T> conv<T>(DiffContext<T>&, const ParamStore<T>&, const std::string&, Var<T>,    \
                          std::size_t, std::size_t, std::size_t);                               \
  template void init_attention<T>(ParamStore<T>&, const Init&, const std::string&, std::size_t); \
  template void init_mlp<T>(ParamStore<T>&, const Init&, const std::string&, std::size_t,       \
                            std::size_t, std::size_t, std::size_t);                             \
  template Var<T> linear<T>(DiffContext<T>&, const ParamStore<T>&, const std::string&, Var<T>); \
  template Var<T> layer_norm<T>(DiffContext<T>&, const ParamStore<T>&, const std::string&,      \
                                Var<T>);                                                        \
  template Var<T> mlp<T>(DiffContext<T>&, const ParamStore<T>&, const std::string&,             \
                         std::size_t, Var<T>);                                                  \
  template AttentionWeights<T> bind_attention<T>(DiffContext<T>&, const ParamStore<T>&,         \
                                                 const std::string&);                           \
  template Var<T> multi_head_attention<T>(Var<T>, Var<T>, Var<T>, const AttentionWeights<T>&,   \
                                          std::size_t, const AttentionMask*, Tensor<T>*);       \
  template Var<T> multi_head_self_attention<T>(Var<T>, const AttentionWeights<T>&, std::size_t, \
                                               const AttentionMask*, Tensor<T>*);

EFH_INSTANTIATE_LAYERS(float)
EFH_INSTANTIATE_LAYERS(double)

#undef EFH_INSTANTIATE_LAYERS

}  // namespace efh::layers
