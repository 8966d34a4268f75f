#pragma once

#include <vector>

#include "efh/ela_decoder/decoder.hpp"
#include "efh/numcore/rng.hpp"
#include "efh/training/matching.hpp"

namespace efh::training {

struct DnConfig {
  std::size_t groups = 3;
  double box_noise = 0.4;
  double label_flip = 0.25;

  void validate() const;
};

/// Noised copies of the ground truth: `groups` blocks of G rows, row
/// i of every block reconstructing gt i.
struct DnSample {
  TensorD boxes{Shape{0, 4}};        // [groups*G, 4]
  std::vector<std::size_t> labels;   // possibly flipped label per row
  std::size_t groups = 0;
  std::size_t per_group = 0;

  std::size_t count() const { return groups * per_group; }
};

/// Jitters centers by up to noise*(w,h)/2 and sizes by a factor in
/// [1-noise, 1+noise], clamps into (0,1), and flips labels to a different
/// label with probability `label_flip`.
DnSample make_dn_queries(const GroundTruth& gt, const DnConfig& cfg, std::size_t num_labels,
                         CounterRng& rng);

/// Decoder inputs for a DnSample: content = dn_content(e(label)).
template <typename T>
ela_decoder::DnQueries<T> dn_inputs(DiffContext<T>& ctx, const ParamStore<T>& store,
                                    const DnSample& dn, Var<T> label_features);

/// Weighted terms of a loss, as plain numbers.
struct LossTerms {
  double cls = 0;
  double l1 = 0;
  double giou = 0;

  double sum() const { return cls + l1 + giou; }
  LossTerms& operator+=(const LossTerms& o) {
    cls += o.cls;
    l1 += o.l1;
    giou += o.giou;
    return *this;
  }
};

template <typename T>
struct LossPart {
  Var<T> value;                   // scalar
  std::vector<Var<T>> per_layer;  // summed in order to give `value`
  LossTerms terms;
};

/// Soft-target BCE over every row plus L1 and GIoU over the assigned rows,
/// each weighted and divided by `norm`.
template <typename T>
Var<T> assigned_loss(DiffContext<T>& ctx, Var<T> boxes, Var<T> logits, const GroundTruth& gt,
                     const Assignment& a, double w_cls, double w_l1, double w_giou, double norm,
                     LossTerms* terms);

/// Matching-query loss of a single decoder layer.
template <typename T>
Var<T> layer_detection_loss(DiffContext<T>& ctx, const ela_decoder::LayerRecord<T>& layer,
                            std::size_t dn_count, const GroundTruth& gt, const LossWeights& w,
                            LossTerms* terms = nullptr);

/// Sum over decoder layers of independently matched per-layer losses.
template <typename T>
LossPart<T> detection_loss(DiffContext<T>& ctx, const ela_decoder::DecoderOutput<T>& out,
                           const GroundTruth& gt, const LossWeights& w);

/// Reconstruction loss of the dn rows with their known targets, averaged
/// over groups and summed over layers.
template <typename T>
LossPart<T> dn_loss(DiffContext<T>& ctx, const ela_decoder::DecoderOutput<T>& out,
                    const GroundTruth& gt, const DnSample& dn, const LossWeights& w);

template <typename T>
Var<T> total_loss(Var<T> od, Var<T> dn);

/// Plain-number summary of one loss evaluation.
struct LossBreakdown {
  LossTerms od;
  LossTerms dn;
  double od_total = 0;
  double dn_total = 0;
  double total = 0;

  LossBreakdown& operator+=(const LossBreakdown& o);
  LossBreakdown scaled(double f) const;
};

}  // namespace efh::training
