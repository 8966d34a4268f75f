#include "efh/training/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "efh/numcore/box.hpp"
#include "efh/numcore/errors.hpp"

namespace efh::training {

void GroundTruth::validate(std::size_t num_labels) const {
  if (boxes.rank() != 2 || boxes.dim(1) != 4 || boxes.dim(0) != labels.size()) {
    throw ArgumentError("ground truth: boxes " + shape_str(boxes.shape()) + " for " +
                        std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < size(); ++i) {
    if (labels[i] >= num_labels) throw ArgumentError("ground truth: label index out of range");
    for (int c = 0; c < 4; ++c) {
      const double v = boxes.at(i, c);
      if (!(v > 0.0 && v < 1.0)) throw ArgumentError("ground truth: box outside (0,1)");
    }
  }
}

void LossWeights::validate() const {
  for (double v : {cls, l1, giou, dn_cls, dn_l1, dn_giou}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and >= 0");
  }
}

namespace {

void check_box(const Box& b) {
  if (!(b[2] > 0.0 && b[3] > 0.0)) throw ArgumentError("box needs positive width and height");
}

double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

double giou(const Box& a, const Box& b) {
  check_box(a);
  check_box(b);
  return box::giou<double>(a, b);
}

double iou(const Box& a, const Box& b) {
  check_box(a);
  check_box(b);
  return box::iou<double>(a, b);
}

std::vector<std::size_t> hungarian(const std::vector<double>& cost, std::size_t rows,
                                   std::size_t cols) {
  if (rows > cols) throw ArgumentError("hungarian: more rows than columns");
  if (cost.size() != rows * cols) throw DimensionError("hungarian: cost size mismatch");
  if (rows == 0) return {};
  // Potentials u (rows) and v (cols), 1-based with a virtual column 0.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<std::size_t> p(cols + 1, 0), way(cols + 1, 0);
  for (std::size_t i = 1; i <= rows; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(cols + 1, inf);
    std::vector<char> used(cols + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<std::size_t> out(rows);
  for (std::size_t j = 1; j <= cols; ++j) {
    if (p[j]) out[p[j] - 1] = j - 1;
  }
  return out;
}

Assignment Assignment::from_pairs(std::vector<std::size_t> gt_to_query, std::size_t num_queries) {
  Assignment a;
  a.query_to_gt.assign(num_queries, -1);
  for (std::size_t g = 0; g < gt_to_query.size(); ++g) {
    if (gt_to_query[g] >= num_queries || a.query_to_gt[gt_to_query[g]] != -1) {
      throw ArgumentError("assignment is not one-to-one");
    }
    a.query_to_gt[gt_to_query[g]] = static_cast<long>(g);
  }
  a.gt_to_query = std::move(gt_to_query);
  return a;
}

double match_cost(const TensorD& boxes, const TensorD& logits, std::size_t q, const GroundTruth& gt,
                  std::size_t g, const LossWeights& w) {
  const Box pred{boxes.at(q, 0), boxes.at(q, 1), boxes.at(q, 2), boxes.at(q, 3)};
  const Box target = gt.box(g);
  double l1 = 0;
  for (int c = 0; c < 4; ++c) l1 += std::abs(pred[c] - target[c]);
  return w.cls * (1.0 - sigmoid(logits.at(q, gt.labels[g]))) + w.l1 * l1 +
         w.giou * (1.0 - giou(pred, target));
}

Assignment hungarian_match(const TensorD& boxes, const TensorD& logits, const GroundTruth& gt,
                           const LossWeights& w) {
  const std::size_t n = boxes.dim(0), g = gt.size();
  if (g > n) {
    throw ArgumentError("hungarian_match: " + std::to_string(g) + " ground-truth boxes for " +
                        std::to_string(n) + " queries");
  }
  std::vector<double> cost(g * n);
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t q = 0; q < n; ++q) cost[i * n + q] = match_cost(boxes, logits, q, gt, i, w);
  return Assignment::from_pairs(hungarian(cost, g, n), n);
}

TensorD iou_aware_cls_targets(const Assignment& a, const TensorD& boxes, const GroundTruth& gt,
                              std::size_t num_labels) {
  TensorD t({boxes.dim(0), num_labels});
  for (std::size_t g = 0; g < a.gt_to_query.size(); ++g) {
    const std::size_t q = a.gt_to_query[g];
    const Box pred{boxes.at(q, 0), boxes.at(q, 1), boxes.at(q, 2), boxes.at(q, 3)};
    t.at(q, gt.labels[g]) = std::clamp(iou(pred, gt.box(g)), 0.0, 1.0);
  }
  return t;
}

}  // namespace efh::training
