#include "efh/training/loss.hpp"

#include <algorithm>

#include "efh/numcore/layers.hpp"
#include "efh/numcore/ops.hpp"

namespace efh::training {

void DnConfig::validate() const {
  if (!(box_noise >= 0.0 && box_noise < 1.0)) throw ConfigError("dn box_noise must be in [0,1)");
  if (!(label_flip >= 0.0 && label_flip <= 1.0)) throw ConfigError("dn label_flip must be in [0,1]");
}

namespace {

constexpr double kBoxEps = 1e-4;

double clamp_unit(double v) { return std::clamp(v, kBoxEps, 1.0 - kBoxEps); }

template <typename T>
Var<T> zero_scalar(DiffContext<T>& ctx) {
  return ctx.constant(Tensor<T>::scalar(T(0)));
}

GroundTruth repeat(const GroundTruth& gt, std::size_t times) {
  GroundTruth out;
  out.image = gt.image;
  out.boxes = TensorD({gt.size() * times, 4});
  for (std::size_t k = 0; k < times; ++k) {
    for (std::size_t i = 0; i < gt.size(); ++i) {
      for (int c = 0; c < 4; ++c) out.boxes.at(k * gt.size() + i, c) = gt.boxes.at(i, c);
      out.labels.push_back(gt.labels[i]);
    }
  }
  return out;
}

}  // namespace

DnSample make_dn_queries(const GroundTruth& gt, const DnConfig& cfg, std::size_t num_labels,
                         CounterRng& rng) {
  cfg.validate();
  DnSample out;
  if (cfg.groups == 0 || gt.size() == 0) return out;
  out.groups = cfg.groups;
  out.per_group = gt.size();
  out.boxes = TensorD({out.count(), 4});
  const double n = cfg.box_noise;
  for (std::size_t k = 0; k < cfg.groups; ++k) {
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const std::size_t r = k * gt.size() + i;
      const Box b = gt.box(i);
      double cx = b[0], cy = b[1], w = b[2], h = b[3];
      if (n > 0) {
        cx += rng.uniform(-1.0, 1.0) * n * w / 2;
        cy += rng.uniform(-1.0, 1.0) * n * h / 2;
        w *= rng.uniform(1.0 - n, 1.0 + n);
        h *= rng.uniform(1.0 - n, 1.0 + n);
      }
      out.boxes.at(r, 0) = clamp_unit(cx);
      out.boxes.at(r, 1) = clamp_unit(cy);
      out.boxes.at(r, 2) = clamp_unit(w);
      out.boxes.at(r, 3) = clamp_unit(h);
      std::size_t label = gt.labels[i];
      if (num_labels > 1 && cfg.label_flip > 0 && rng.bernoulli(cfg.label_flip)) {
        label = (label + 1 + rng.below(num_labels - 1)) % num_labels;
      }
      out.labels.push_back(label);
    }
  }
  return out;
}

template <typename T>
ela_decoder::DnQueries<T> dn_inputs(DiffContext<T>& ctx, const ParamStore<T>& store,
                                    const DnSample& dn, Var<T> label_features) {
  ela_decoder::DnQueries<T> q;
  q.groups = dn.groups;
  q.per_group = dn.per_group;
  q.boxes = dn.boxes.cast<T>();
  if (dn.count() > 0) {
    q.content = layers::linear(ctx, store, "decoder.dn_content",
                               ops::gather_rows(label_features, dn.labels));
  }
  return q;
}

template <typename T>
Var<T> assigned_loss(DiffContext<T>& ctx, Var<T> boxes, Var<T> logits, const GroundTruth& gt,
                     const Assignment& a, double w_cls, double w_l1, double w_giou, double norm,
                     LossTerms* terms) {
  const TensorD box_values = boxes.value().template cast<double>();
  const Tensor<T> targets =
      ctx.freeze(iou_aware_cls_targets(a, box_values, gt, logits.dim(1)).template cast<T>());
  Var<T> loss = ops::scale(ops::bce_with_logits_sum(logits, targets), T(w_cls / norm));
  LossTerms local;
  local.cls = static_cast<double>(loss.value()[0]);
  if (gt.size() > 0) {
    const Var<T> matched = ops::gather_rows(boxes, a.gt_to_query);
    const Tensor<T> target_boxes = gt.boxes.cast<T>();
    const Var<T> l1 = ops::scale(ops::l1_sum(matched, target_boxes), T(w_l1 / norm));
    const Var<T> gi = ops::scale(ops::giou_loss_sum(matched, target_boxes), T(w_giou / norm));
    local.l1 = static_cast<double>(l1.value()[0]);
    local.giou = static_cast<double>(gi.value()[0]);
    loss = ops::add(ops::add(loss, l1), gi);
  }
  if (terms) *terms += local;
  return loss;
}

template <typename T>
Var<T> layer_detection_loss(DiffContext<T>& ctx, const ela_decoder::LayerRecord<T>& layer,
                            std::size_t dn_count, const GroundTruth& gt, const LossWeights& w,
                            LossTerms* terms) {
  const std::size_t n = layer.boxes.dim(0);
  const Var<T> boxes = ops::slice(layer.boxes, 0, dn_count, n);
  const Var<T> logits = ops::slice(layer.logits, 0, dn_count, n);
  gt.validate(logits.dim(1));
  const auto matched = hungarian_match(boxes.value().template cast<double>(),
                                       logits.value().template cast<double>(), gt, w);
  const Assignment a =
      Assignment::from_pairs(ctx.decide(matched.gt_to_query), boxes.dim(0));
  const double norm = static_cast<double>(std::max<std::size_t>(gt.size(), 1));
  return assigned_loss(ctx, boxes, logits, gt, a, w.cls, w.l1, w.giou, norm, terms);
}

template <typename T>
LossPart<T> detection_loss(DiffContext<T>& ctx, const ela_decoder::DecoderOutput<T>& out,
                           const GroundTruth& gt, const LossWeights& w) {
  w.validate();
  LossPart<T> part;
  part.value = zero_scalar(ctx);
  for (const auto& layer : out.layers) {
    part.per_layer.push_back(layer_detection_loss(ctx, layer, out.dn_count, gt, w, &part.terms));
  }
  if (!part.per_layer.empty()) {
    part.value = part.per_layer.front();
    for (std::size_t l = 1; l < part.per_layer.size(); ++l) {
      part.value = ops::add(part.value, part.per_layer[l]);
    }
  }
  return part;
}

template <typename T>
LossPart<T> dn_loss(DiffContext<T>& ctx, const ela_decoder::DecoderOutput<T>& out,
                    const GroundTruth& gt, const DnSample& dn, const LossWeights& w) {
  w.validate();
  LossPart<T> part;
  part.value = zero_scalar(ctx);
  if (dn.count() == 0) return part;
  if (out.dn_count != dn.count() || dn.per_group != gt.size()) {
    throw ArgumentError("dn_loss: decoder output does not match the dn layout");
  }
  const GroundTruth targets = repeat(gt, dn.groups);
  std::vector<std::size_t> identity(dn.count());
  for (std::size_t i = 0; i < identity.size(); ++i) identity[i] = i;
  const Assignment a = Assignment::from_pairs(identity, dn.count());
  const double norm = static_cast<double>(dn.groups * std::max<std::size_t>(gt.size(), 1));
  for (const auto& layer : out.layers) {
    const Var<T> boxes = ops::slice(layer.boxes, 0, 0, dn.count());
    const Var<T> logits = ops::slice(layer.logits, 0, 0, dn.count());
    part.per_layer.push_back(assigned_loss(ctx, boxes, logits, targets, a, w.dn_cls, w.dn_l1,
                                           w.dn_giou, norm, &part.terms));
  }
  part.value = part.per_layer.front();
  for (std::size_t l = 1; l < part.per_layer.size(); ++l) {
    part.value = ops::add(part.value, part.per_layer[l]);
  }
  return part;
}

template <typename T>
Var<T> total_loss(Var<T> od, Var<T> dn) {
  return ops::add(od, dn);
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  od += o.od;
  dn += o.dn;
  od_total += o.od_total;
  dn_total += o.dn_total;
  total += o.total;
  return *this;
}

LossBreakdown LossBreakdown::scaled(double f) const {
  LossBreakdown b = *this;
  for (LossTerms* t : {&b.od, &b.dn}) {
    t->cls *= f;
    t->l1 *= f;
    t->giou *= f;
  }
  b.od_total *= f;
  b.dn_total *= f;
  b.total *= f;
  return b;
}

#define EFH_INSTANTIATE(T)                                                                        \
  template ela_decoder::DnQueries<T> dn_inputs<T>(DiffContext<T>&, const ParamStore<T>&,         \
                                                  const DnSample&, Var<T>);                      \
  template Var<T> assigned_loss<T>(DiffContext<T>&, Var<T>, Var<T>, const GroundTruth&,          \
                                   const Assignment&, double, double, double, double,            \
                                   LossTerms*);                                                  \
  template Var<T> layer_detection_loss<T>(DiffContext<T>&, const ela_decoder::LayerRecord<T>&,  \
                                          std::size_t, const GroundTruth&, const LossWeights&,   \
                                          LossTerms*);                                           \
  template LossPart<T> detection_loss<T>(DiffContext<T>&, const ela_decoder::DecoderOutput<T>&,  \
                                         const GroundTruth&, const LossWeights&);                \
  template LossPart<T> dn_loss<T>(DiffContext<T>&, const ela_decoder::DecoderOutput<T>&,         \
                                  const GroundTruth&, const DnSample&, const LossWeights&);      \
  template Var<T> total_loss<T>(Var<T>, Var<T>);
EFH_INSTANTIATE(float)
EFH_INSTANTIATE(double)
#undef EFH_INSTANTIATE

}  // namespace efh::training
