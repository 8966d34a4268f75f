#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "efh/numcore/autodiff.hpp"
#include "efh/numcore/params.hpp"

namespace efh {

/// Scalar function of a list of inputs, evaluated inside a context.
using ScalarFn =
    std::function<Var<double>(DiffContext<double>&, const std::vector<Var<double>>&)>;

/// Largest |analytic - numeric| / max(1, |numeric|) over every coordinate of
/// every input, with numeric = (f(x+h) - f(x-h)) / 2h. Values passed
/// through DiffContext::detach and DiffContext::decide are held at their
/// unperturbed values in the numeric evaluations.
double grad_check(const ScalarFn& f, std::vector<TensorD> inputs, double h = 1e-6);

/// Scalar function of a parameter store.
using StoreFn = std::function<Var<double>(DiffContext<double>&, const ParamStore<double>&)>;

/// One scalar inside a named parameter.
struct Coordinate {
  std::string name;
  std::size_t index = 0;
};

/// grad_check restricted to the listed parameter coordinates; `store` is
/// perturbed in place and restored.
double param_spot_check(const StoreFn& f, ParamStore<double>& store,
                        const std::vector<Coordinate>& coords, double h = 1e-6);

/// `count` coordinates: a uniformly chosen trainable parameter, then a
/// uniformly chosen element of it.
std::vector<Coordinate> pick_coordinates(const ParamStore<double>& store, std::size_t count,
                                         CounterRng& rng);

/// Relative error metric used by grad_check.
inline double grad_rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

}  // namespace efh
