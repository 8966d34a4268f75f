#pragma once

#include "efh/numcore/rng.hpp"
#include "efh/numcore/tensor.hpp"

namespace efh::test {

template <typename T>
Tensor<T> random_tensor(CounterRng& rng, Shape shape, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-scale, scale));
  return t;
}

}  // namespace efh::test
