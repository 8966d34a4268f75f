#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "efh/numcore/autodiff.hpp"
#include "efh/numcore/rng.hpp"
#include "efh/numcore/tensor.hpp"

namespace efh {

/// Named model parameters in a deterministic (sorted) order.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    Tensor<T> value;
    bool trainable = true;
  };

  Tensor<T>& add(const std::string& name, Tensor<T> value, bool trainable = true) {
    auto [it, inserted] = entries_.insert_or_assign(name, Entry{std::move(value), trainable});
    return it->second.value;
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  const Tensor<T>& get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ArgumentError("unknown parameter '" + name + "'");
    return it->second.value;
  }

  Tensor<T>& get(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ArgumentError("unknown parameter '" + name + "'");
    return it->second.value;
  }

  bool trainable(const std::string& name) const {
    auto it = entries_.find(name);
    return it != entries_.end() && it->second.trainable;
  }

  /// Marks every parameter whose name starts with `prefix`.
  void set_trainable_prefix(const std::string& prefix, bool flag) {
    for (auto& [name, e] : entries_) {
      if (name.rfind(prefix, 0) == 0) e.trainable = flag;
    }
  }

  /// Binds a parameter into a context as a named leaf.
  Var<T> var(DiffContext<T>& ctx, const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ArgumentError("unknown parameter '" + name + "'");
    return ctx.param(name, it->second.value, it->second.trainable);
  }

  std::map<std::string, Entry>& entries() { return entries_; }
  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t total_values() const {
    std::size_t n = 0;
    for (const auto& [name, e] : entries_) n += e.value.numel();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, e] : entries_) out.add(name, e.value.template cast<U>(), e.trainable);
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (const auto& [name, e] : a.entries_) {
      auto it = b.entries_.find(name);
      if (it == b.entries_.end() || !bit_identical(e.value, it->second.value)) return false;
    }
    return true;
  }

 private:
  std::map<std::string, Entry> entries_;
};

/// Deterministic initializers. Each tensor draws from its own stream keyed
/// by the parameter name, so adding a parameter never perturbs the others.
struct Init {
  std::uint64_t seed = 0;

  CounterRng stream(const std::string& name) const {
    return CounterRng(seed, CounterRng::hash(name));
  }

  template <typename T>
  Tensor<T> uniform(const std::string& name, Shape shape, double bound) const {
    CounterRng rng = stream(name);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
  }

  /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  template <typename T>
  Tensor<T> fan_in(const std::string& name, Shape shape, std::size_t fan) const {
    return uniform<T>(name, std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan)));
  }
};

}  // namespace efh
