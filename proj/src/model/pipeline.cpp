#include "efh/model/pipeline.hpp"

namespace efh::model {

void ArchConfig::sync(std::size_t d, std::size_t d_text) {
  text.d_text = d_text;
  backbone.d = d;
  encoder.d = d;
  encoder.d_text = d_text;
  decoder.d = d;
  decoder.d_text = d_text;
}

void ArchConfig::validate() const {
  text.validate();
  encoder.validate();
  decoder.validate();
  if (backbone.d != encoder.d || encoder.d != decoder.d) {
    throw ConfigError("backbone, encoder and decoder widths differ");
  }
  if (text.d_text != encoder.d_text || text.d_text != decoder.d_text) {
    throw ConfigError("text width differs between text encoder and heads");
  }
}

template <typename T>
void init_model(ParamStore<T>& store, std::uint64_t seed, const ArchConfig& arch) {
  arch.validate();
  const Init init{seed};
  textenc::init_text_encoder(store, init, arch.text);
  imgbackbone::init_backbone(store, init, arch.backbone);
  ela_encoder::init_encoder(store, init, arch.encoder);
  ela_decoder::init_decoder(store, init, arch.decoder);
}

template <typename T>
imgbackbone::FeaturePyramid<T> run_backbone(DiffContext<T>& ctx, const ParamStore<T>& store,
                                            const ArchConfig& arch, Var<T> image) {
  return imgbackbone::extract_pyramid(ctx, store, arch.backbone, image);
}

template <typename T>
Encoded<T> run_encoder(DiffContext<T>& ctx, const ParamStore<T>& store, const ArchConfig& arch,
                       const imgbackbone::FeaturePyramid<T>& pyramid, Var<T> projected_labels) {
  Encoded<T> out;
  const Var<T> f5 = ela_encoder::aifi(ctx, store, arch.encoder, pyramid.p5);
  out.enc = ela_encoder::ccfm(ctx, store, arch.encoder, pyramid.p3, pyramid.p4, f5);
  out.candidates = ela_encoder::predict_candidate_boxes(ctx, store, out.enc);
  out.relevance = ela_encoder::relevance_scores(out.enc.memory.value(), projected_labels.value());
  out.proposals = ela_encoder::select_queries(ctx, out.candidates, out.relevance,
                                              arch.decoder.num_queries);
  return out;
}

template <typename T>
Forward<T> forward(DiffContext<T>& ctx, const ParamStore<T>& store, const ArchConfig& arch,
                   Var<T> image, Var<T> label_features, Var<T> prompt_features,
                   const ela_decoder::DnQueries<T>* dn) {
  Forward<T> out;
  out.projected_labels = ela_encoder::project_labels(ctx, store, label_features);
  const auto pyramid = run_backbone(ctx, store, arch, image);
  out.encoded = run_encoder(ctx, store, arch, pyramid, out.projected_labels);
  out.decoded = ela_decoder::run_decoder(ctx, store, arch.decoder, out.encoded.proposals.boxes,
                                         prompt_features, out.projected_labels, out.encoded.enc, dn);
  return out;
}

Detector::Detector(ArchConfig arch, ParamStore<float> params)
    : arch_(std::move(arch)), params_(std::move(params)) {
  arch_.validate();
}

ela_decoder::DetectionSet Detector::detect(const TensorF& image,
                                           const std::vector<std::string>& labels,
                                           const std::string& prompt,
                                           textenc::LanguageCache<float>* cache,
                                           StageTimes* times) const {
  imgbackbone::check_image(image);
  StageTimes local;
  Stopwatch watch;
  const auto label_emb = textenc::encode_labels(params_, arch_.text, labels, cache);
  const auto prompt_emb = textenc::encode_prompt(params_, arch_.text, prompt, cache);
  local.text_backbone = watch.lap();

  DiffContext<float> ctx(false);
  const auto pyramid = run_backbone(ctx, params_, arch_, ctx.constant(image));
  local.image_backbone = watch.lap();

  const Var<float> projected =
      ela_encoder::project_labels(ctx, params_, ctx.constant(label_emb.embeddings));
  const auto encoded = run_encoder(ctx, params_, arch_, pyramid, projected);
  local.encoder_fpn = watch.lap();

  const auto decoded = ela_decoder::run_decoder(ctx, params_, arch_.decoder,
                                                encoded.proposals.boxes,
                                                ctx.constant(prompt_emb.embeddings), projected,
                                                encoded.enc);
  auto set = ela_decoder::collect_detections(decoded, arch_.decoder.score_threshold);
  local.decoder_head = watch.lap();
  local.total = watch.total();

  set.prompt = prompt;
  set.labels = labels;
  if (times) *times = local;
  return set;
}

void Detector::warm_cache(const std::vector<std::string>& labels, const std::string& prompt,
                          textenc::LanguageCache<float>& cache) const {
  textenc::encode_labels(params_, arch_.text, labels, &cache);
  textenc::encode_prompt(params_, arch_.text, prompt, &cache);
}

#define EFH_INSTANTIATE(T)                                                                     \
  template void init_model<T>(ParamStore<T>&, std::uint64_t, const ArchConfig&);              \
  template imgbackbone::FeaturePyramid<T> run_backbone<T>(DiffContext<T>&,                    \
                                                          const ParamStore<T>&,               \
                                                          const ArchConfig&, Var<T>);         \
  template Encoded<T> run_encoder<T>(DiffContext<T>&, const ParamStore<T>&, const ArchConfig&, \
                                     const imgbackbone::FeaturePyramid<T>&, Var<T>);          \
  template Forward<T> forward<T>(DiffContext<T>&, const ParamStore<T>&, const ArchConfig&,    \
                                 Var<T>, Var<T>, Var<T>, const ela_decoder::DnQueries<T>*);
EFH_INSTANTIATE(float)
EFH_INSTANTIATE(double)
#undef EFH_INSTANTIATE

}  // namespace efh::model
