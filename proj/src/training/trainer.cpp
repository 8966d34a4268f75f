#include "efh/training/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "efh/numcore/tnsr.hpp"

namespace efh::training {

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be finite and >= 0");
  if (batch == 0) throw ConfigError("batch must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("adam betas must be in [0,1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be >= 0");
  weights.validate();
  dn.validate();
}

double lr_at(const TrainConfig& cfg, std::size_t step) {
  double lr = cfg.lr;
  if (10 * step >= 7 * cfg.steps) lr *= 0.1;
  if (10 * step >= 9 * cfg.steps) lr *= 0.1;
  return lr;
}

template <typename T>
void AdamW<T>::update(ParamStore<T>& store, const std::map<std::string, Tensor<T>>& grads,
                      double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    if (!store.trainable(name)) continue;
    Tensor<T>& p = store.get(name);
    if (g.shape() != p.shape()) throw DimensionError("AdamW: gradient shape mismatch for " + name);
    auto [it, fresh] = state_.try_emplace(name);
    if (fresh) {
      it->second.m = Tensor<T>(p.shape());
      it->second.v = Tensor<T>(p.shape());
    }
    Tensor<T>& m = it->second.m;
    Tensor<T>& v = it->second.v;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = beta1_ * static_cast<double>(m[i]) + (1.0 - beta1_) * gi;
      const double vi = beta2_ * static_cast<double>(v[i]) + (1.0 - beta2_) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double pi = static_cast<double>(p[i]);
      const double step = (mi / c1) / (std::sqrt(vi / c2) + eps_) + weight_decay_ * pi;
      p[i] = static_cast<T>(pi - lr * step);
    }
  }
}

template <typename T>
Var<T> example_loss(DiffContext<T>& ctx, const ParamStore<T>& store, const model::ArchConfig& arch,
                    const TrainExample& ex, const LossWeights& w, const DnSample& dn,
                    LossBreakdown* breakdown, textenc::LanguageCache<T>* cache) {
  const TaskSample& s = ex.sample;
  s.validate();
  Var<T> label_feat, prompt_feat;
  if (cache && arch.text.fully_frozen()) {
    label_feat = ctx.constant(textenc::encode_labels(store, arch.text, s.labels, cache).embeddings);
    prompt_feat = ctx.constant(textenc::encode_prompt(store, arch.text, s.prompt, cache).embeddings);
  } else {
    label_feat = textenc::label_features(ctx, store, arch.text, s.labels);
    prompt_feat = textenc::prompt_features(ctx, store, arch.text, s.prompt);
  }
  const auto dn_q = dn_inputs(ctx, store, dn, label_feat);
  const auto fwd = model::forward(ctx, store, arch, ctx.constant(ex.image.cast<T>()), label_feat,
                                  prompt_feat, dn.count() ? &dn_q : nullptr);
  const auto od = detection_loss(ctx, fwd.decoded, s.gt, w);
  const auto dnl = dn_loss(ctx, fwd.decoded, s.gt, dn, w);
  const Var<T> total = total_loss(od.value, dnl.value);
  if (breakdown) {
    breakdown->od = od.terms;
    breakdown->dn = dnl.terms;
    breakdown->od_total = static_cast<double>(od.value.value()[0]);
    breakdown->dn_total = static_cast<double>(dnl.value.value()[0]);
    breakdown->total = static_cast<double>(total.value()[0]);
  }
  return total;
}

template <typename T>
double grad_norm(const std::map<std::string, Tensor<T>>& grads) {
  double sq = 0;
  for (const auto& [name, g] : grads)
    for (T v : g.data()) sq += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(sq);
}

template <typename T>
LossBreakdown train_step(ParamStore<T>& store, const model::ArchConfig& arch,
                         const std::vector<const TrainExample*>& batch, AdamW<T>& opt,
                         const TrainConfig& cfg, std::size_t step,
                         textenc::LanguageCache<T>* cache) {
  if (batch.empty()) throw ArgumentError("train_step: empty batch");
  std::map<std::string, Tensor<T>> grads;
  LossBreakdown total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const TrainExample& ex = *batch[i];
    CounterRng rng(CounterRng::mix(cfg.seed) + step, 0xD0 + i);
    const DnSample dn = make_dn_queries(ex.sample.gt, cfg.dn, ex.sample.labels.size(), rng);
    DiffContext<T> ctx;
    LossBreakdown b;
    const Var<T> loss = example_loss(ctx, store, arch, ex, cfg.weights, dn, &b, cache);
    if (!std::isfinite(b.total)) {
      throw NumericError("non-finite loss at step " + std::to_string(step) + " on '" +
                         ex.sample.image + "'");
    }
    const auto g = ctx.backward(loss);
    for (const auto& [name, t] : g.named()) {
      auto [it, fresh] = grads.try_emplace(name, t);
      if (!fresh) {
        for (std::size_t k = 0; k < t.numel(); ++k) it->second[k] += t[k];
      }
    }
    total += b;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  double factor = inv;
  if (cfg.clip_norm > 0) {
    const double norm = grad_norm(grads) * inv;
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient at step " + std::to_string(step));
    if (norm > cfg.clip_norm) factor *= cfg.clip_norm / norm;
  }
  for (auto& [name, g] : grads)
    for (auto& v : g.data()) v = static_cast<T>(static_cast<double>(v) * factor);
  opt.update(store, grads, lr_at(cfg, step));
  return total.scaled(inv);
}

template <typename T>
void train(ParamStore<T>& store, const model::ArchConfig& arch, const std::vector<TrainExample>& data,
           const TrainConfig& cfg, const std::function<void(const StepLog&)>& log) {
  cfg.validate();
  if (data.empty() && cfg.steps > 0) throw ArgumentError("train: no training data");
  AdamW<T> opt(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  textenc::LanguageCache<T> cache;
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size(), epoch = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<const TrainExample*> batch;
    while (batch.size() < std::min(cfg.batch, data.size())) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), 0);
        CounterRng rng(cfg.seed, CounterRng::hash("epoch") + epoch++);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        cursor = 0;
      }
      batch.push_back(&data[order[cursor++]]);
    }
    StepLog entry;
    entry.step = step;
    entry.lr = lr_at(cfg, step);
    entry.loss = train_step(store, arch, batch, opt, cfg, step, &cache);
    if (log) log(entry);
  }
}

ApResult evaluate_ap(const std::vector<std::vector<ela_decoder::Detection>>& detections,
                     const std::vector<GroundTruth>& gts, std::size_t num_labels,
                     double iou_threshold) {
  if (detections.size() != gts.size()) throw ArgumentError("evaluate_ap: image count mismatch");
  ApResult out;
  out.per_label.resize(num_labels);
  double sum = 0;
  std::size_t counted = 0;
  for (std::size_t label = 0; label < num_labels; ++label) {
    std::size_t positives = 0;
    for (const auto& gt : gts) positives += std::count(gt.labels.begin(), gt.labels.end(), label);
    if (positives == 0) continue;
    struct Ref {
      double score;
      std::size_t image;
      std::size_t index;
    };
    std::vector<Ref> refs;
    for (std::size_t i = 0; i < detections.size(); ++i)
      for (std::size_t k = 0; k < detections[i].size(); ++k)
        if (detections[i][k].label == label) refs.push_back({detections[i][k].score, i, k});
    std::stable_sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });
    std::vector<std::vector<char>> taken(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) taken[i].assign(gts[i].size(), 0);
    std::vector<double> precision, recall;
    std::size_t tp = 0;
    for (std::size_t r = 0; r < refs.size(); ++r) {
      const auto& det = detections[refs[r].image][refs[r].index];
      const GroundTruth& gt = gts[refs[r].image];
      double best = iou_threshold;
      long match = -1;
      for (std::size_t g = 0; g < gt.size(); ++g) {
        if (gt.labels[g] != label || taken[refs[r].image][g]) continue;
        const Box b{std::max(det.box[0], 0.0), std::max(det.box[1], 0.0), std::max(det.box[2], 1e-12),
                    std::max(det.box[3], 1e-12)};
        const double v = iou(b, gt.box(g));
        if (v >= best) {
          best = v;
          match = static_cast<long>(g);
        }
      }
      if (match >= 0) {
        taken[refs[r].image][match] = 1;
        ++tp;
      }
      precision.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
      recall.push_back(static_cast<double>(tp) / static_cast<double>(positives));
    }
    for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = 0, prev_recall = 0;
    for (std::size_t i = 0; i < precision.size(); ++i) {
      ap += (recall[i] - prev_recall) * precision[i];
      prev_recall = recall[i];
    }
    out.per_label[label] = ap;
    sum += ap;
    ++counted;
  }
  out.mean = counted ? sum / static_cast<double>(counted) : 0.0;
  return out;
}

template <typename T>
std::vector<std::vector<ela_decoder::Detection>> predict(const ParamStore<T>& store,
                                                         const model::ArchConfig& arch,
                                                         const std::vector<TrainExample>& data,
                                                         double threshold) {
  std::vector<std::vector<ela_decoder::Detection>> out;
  textenc::LanguageCache<T> cache;
  for (const auto& ex : data) {
    DiffContext<T> ctx(false);
    const auto labels = textenc::encode_labels(store, arch.text, ex.sample.labels, &cache);
    const auto prompt = textenc::encode_prompt(store, arch.text, ex.sample.prompt, &cache);
    const auto fwd = model::forward(ctx, store, arch, ctx.constant(ex.image.cast<T>()),
                                    ctx.constant(labels.embeddings), ctx.constant(prompt.embeddings));
    out.push_back(ela_decoder::collect_detections(fwd.decoded, threshold).detections);
  }
  return out;
}

namespace {

constexpr char kCheckpointMagic[4] = {'O', 'T', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

template <typename T>
void save_checkpoint(std::ostream& os, const ParamStore<T>& store) {
  io::write_bytes(os, kCheckpointMagic, 4);
  io::write_u32(os, kCheckpointVersion);
  io::write_u32(os, static_cast<std::uint32_t>(store.size()));
  for (const auto& [name, e] : store.entries()) {
    io::write_u32(os, static_cast<std::uint32_t>(name.size()));
    io::write_bytes(os, name.data(), name.size());
    write_tnsr(os, e.value);
  }
  if (!os) throw FormatError("checkpoint write failed");
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<T>& store) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path.string() + "' for writing");
  save_checkpoint(os, store);
}

template <typename T>
ParamStore<T> load_checkpoint(std::istream& is) {
  char magic[4];
  io::read_bytes(is, magic, 4);
  if (!std::equal(magic, magic + 4, kCheckpointMagic)) throw FormatError("not an OTCK checkpoint");
  if (io::read_u32(is) != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  const std::uint32_t count = io::read_u32(is);
  ParamStore<T> store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = io::read_u32(is);
    if (len > (1u << 16)) throw FormatError("checkpoint tensor name too long");
    std::string name(len, '\0');
    io::read_bytes(is, name.data(), len);
    store.add(name, read_tnsr_as<T>(is));
  }
  return store;
}

template <typename T>
ParamStore<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint '" + path.string() + "'");
  return load_checkpoint<T>(is);
}

#define EFH_INSTANTIATE(T)                                                                        \
  template class AdamW<T>;                                                                        \
  template Var<T> example_loss<T>(DiffContext<T>&, const ParamStore<T>&, const model::ArchConfig&, \
                                  const TrainExample&, const LossWeights&, const DnSample&,       \
                                  LossBreakdown*, textenc::LanguageCache<T>*);                    \
  template double grad_norm<T>(const std::map<std::string, Tensor<T>>&);                         \
  template LossBreakdown train_step<T>(ParamStore<T>&, const model::ArchConfig&,                 \
                                       const std::vector<const TrainExample*>&, AdamW<T>&,       \
                                       const TrainConfig&, std::size_t,                          \
                                       textenc::LanguageCache<T>*);                               \
  template void train<T>(ParamStore<T>&, const model::ArchConfig&,                               \
                         const std::vector<TrainExample>&, const TrainConfig&,                   \
                         const std::function<void(const StepLog&)>&);                             \
  template std::vector<std::vector<ela_decoder::Detection>> predict<T>(                           \
      const ParamStore<T>&, const model::ArchConfig&, const std::vector<TrainExample>&, double);  \
  template void save_checkpoint<T>(std::ostream&, const ParamStore<T>&);                         \
  template void save_checkpoint<T>(const std::filesystem::path&, const ParamStore<T>&);          \
  template ParamStore<T> load_checkpoint<T>(std::istream&);                                      \
  template ParamStore<T> load_checkpoint<T>(const std::filesystem::path&);
EFH_INSTANTIATE(float)
EFH_INSTANTIATE(double)
#undef EFH_INSTANTIATE

}  // namespace efh::training
