#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "efh/numcore/errors.hpp"

namespace efh {

/// Boolean allow/block table for attention. Every row must allow at least
/// one column; a fully blocked row would leave softmax undefined.
class AttentionMask {
 public:
  AttentionMask(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> allow)
      : rows_(rows), cols_(cols), allow_(std::move(allow)) {
    if (allow_.size() != rows_ * cols_) {
      throw DimensionError("attention mask data does not match its shape");
    }
    for (std::size_t r = 0; r < rows_; ++r) {
      bool any = false;
      for (std::size_t c = 0; c < cols_ && !any; ++c) any = allow_[r * cols_ + c] != 0;
      if (!any) {
        throw ArgumentError("attention mask row " + std::to_string(r) + " blocks every column");
      }
    }
  }

  static AttentionMask all_allowed(std::size_t rows, std::size_t cols) {
    return AttentionMask(rows, cols, std::vector<std::uint8_t>(rows * cols, 1));
  }

  static AttentionMask diagonal(std::size_t n) {
    std::vector<std::uint8_t> allow(n * n, 0);
    for (std::size_t i = 0; i < n; ++i) allow[i * n + i] = 1;
    return AttentionMask(n, n, std::move(allow));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool allowed(std::size_t r, std::size_t c) const { return allow_[r * cols_ + c] != 0; }
  const std::vector<std::uint8_t>& table() const { return allow_; }

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<std::uint8_t> allow_;
};

}  // namespace efh
