#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "efh/numcore/tensor.hpp"

namespace efh::training {

using Box = std::array<double, 4>;  // normalized cx, cy, w, h

/// Targets of one image.
struct GroundTruth {
  TensorD boxes{Shape{0, 4}};        // [G, 4]
  std::vector<std::size_t> labels;   // indices into the image's label list
  std::string image;

  std::size_t size() const { return labels.size(); }
  Box box(std::size_t i) const { return {boxes.at(i, 0), boxes.at(i, 1), boxes.at(i, 2), boxes.at(i, 3)}; }
  /// Throws ArgumentError on shape, range or label violations.
  void validate(std::size_t num_labels) const;
};

struct LossWeights {
  double cls = 1.0;
  double l1 = 5.0;
  double giou = 2.0;
  double dn_cls = 1.0;
  double dn_l1 = 5.0;
  double dn_giou = 2.0;

  void validate() const;
};

/// GIoU in (-1, 1]. Throws ArgumentError on non-positive sizes.
double giou(const Box& a, const Box& b);
double iou(const Box& a, const Box& b);

/// Minimum-cost assignment of every row to a distinct column of the
/// row-major `cost` [rows, cols], rows <= cols. Returns the column per row.
std::vector<std::size_t> hungarian(const std::vector<double>& cost, std::size_t rows,
                                   std::size_t cols);

/// One-to-one query/gt assignment.
struct Assignment {
  std::vector<std::size_t> gt_to_query;       // size G
  std::vector<long> query_to_gt;              // size N_q, -1 when unmatched

  static Assignment from_pairs(std::vector<std::size_t> gt_to_query, std::size_t num_queries);
};

/// Matching cost of query q against gt g.
double match_cost(const TensorD& boxes, const TensorD& logits, std::size_t q, const GroundTruth& gt,
                  std::size_t g, const LossWeights& w);

/// Exact minimum of the summed matching cost. Throws ArgumentError if
/// G exceeds the query count.
Assignment hungarian_match(const TensorD& boxes, const TensorD& logits, const GroundTruth& gt,
                           const LossWeights& w);

/// Soft BCE targets: IoU of each matched prediction at its gt label
/// column, zero elsewhere.
TensorD iou_aware_cls_targets(const Assignment& a, const TensorD& boxes, const GroundTruth& gt,
                              std::size_t num_labels);

}  // namespace efh::training
