#include "efh/numcore/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace efh {
namespace {

double evaluate(const ScalarFn& f, const std::vector<TensorD>& inputs,
                const std::shared_ptr<FreezeTape<double>>& tape) {
  DiffContext<double> ctx(false);
  tape->set_mode(FreezeTape<double>::Mode::replay);
  ctx.attach_tape(tape);
  std::vector<Var<double>> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(ctx.constant(t));
  return f(ctx, vars).value().item();
}

}  // namespace

double grad_check(const ScalarFn& f, std::vector<TensorD> inputs, double h) {
  // Detached values and discrete choices are captured once and replayed
  // in every perturbed evaluation.
  auto tape = std::make_shared<FreezeTape<double>>();
  DiffContext<double> ctx(true);
  ctx.attach_tape(tape);
  std::vector<Var<double>> vars;
  for (auto& t : inputs) {
    TensorD enrolled = t;
    enrolled.set_requires_grad(true);
    vars.push_back(ctx.input(std::move(enrolled)));
  }
  const Var<double> loss = f(ctx, vars);
  const Gradients<double> grads = ctx.backward(loss);

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const TensorD* analytic = grads.of(vars[i]);
    for (std::size_t j = 0; j < inputs[i].numel(); ++j) {
      const double saved = inputs[i][j];
      inputs[i][j] = saved + h;
      const double up = evaluate(f, inputs, tape);
      inputs[i][j] = saved - h;
      const double down = evaluate(f, inputs, tape);
      inputs[i][j] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic ? (*analytic)[j] : 0.0;
      worst = std::max(worst, grad_rel_err(a, numeric));
    }
  }
  return worst;
}

double param_spot_check(const StoreFn& f, ParamStore<double>& store,
                        const std::vector<Coordinate>& coords, double h) {
  auto tape = std::make_shared<FreezeTape<double>>();
  Gradients<double> grads;
  {
    DiffContext<double> ctx(true);
    ctx.attach_tape(tape);
    grads = ctx.backward(f(ctx, store));
  }
  auto value = [&] {
    DiffContext<double> ctx(false);
    tape->set_mode(FreezeTape<double>::Mode::replay);
    ctx.attach_tape(tape);
    return f(ctx, store).value().item();
  };
  double worst = 0.0;
  for (const auto& c : coords) {
    TensorD& p = store.get(c.name);
    if (c.index >= p.numel()) throw ArgumentError("coordinate index out of range for " + c.name);
    const double saved = p[c.index];
    p[c.index] = saved + h;
    const double up = value();
    p[c.index] = saved - h;
    const double down = value();
    p[c.index] = saved;
    const TensorD* g = grads.of(c.name);
    const double analytic = g ? (*g)[c.index] : 0.0;
    worst = std::max(worst, grad_rel_err(analytic, (up - down) / (2.0 * h)));
  }
  return worst;
}

std::vector<Coordinate> pick_coordinates(const ParamStore<double>& store, std::size_t count,
                                         CounterRng& rng) {
  std::vector<std::string> names;
  for (const auto& [name, e] : store.entries()) {
    if (e.trainable && e.value.numel() > 0) names.push_back(name);
  }
  if (names.empty()) throw ArgumentError("no trainable parameters to pick from");
  std::vector<Coordinate> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::string& name = names[rng.below(names.size())];
    out.push_back({name, rng.below(store.get(name).numel())});
  }
  return out;
}

}  // namespace efh
