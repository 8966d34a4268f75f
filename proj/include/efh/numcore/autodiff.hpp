#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "efh/numcore/tensor.hpp"

namespace efh {

template <typename T>
class DiffContext;

/// Handle to a value recorded in a DiffContext.
template <typename T>
struct Var {
  DiffContext<T>* ctx = nullptr;
  std::uint32_t id = 0;

  const Tensor<T>& value() const { return ctx->value(*this); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
  bool valid() const { return ctx != nullptr; }
};

/// Values and discrete decisions captured from one forward pass so that a
/// later pass can replay them. Stop-gradient points and argmax-style
/// selections become constants of the function, which is what finite
/// differences must see to agree with the recorded backward pass.
template <typename T>
class FreezeTape {
 public:
  enum class Mode { capture, replay };

  Mode mode() const { return mode_; }
  void set_mode(Mode m) {
    mode_ = m;
    tensor_cursor_ = 0;
    index_cursor_ = 0;
  }

  Tensor<T> tensor(Tensor<T> value) {
    if (mode_ == Mode::capture) {
      tensors_.push_back(value);
      return value;
    }
    if (tensor_cursor_ >= tensors_.size()) throw ArgumentError("freeze tape exhausted (tensors)");
    return tensors_[tensor_cursor_++];
  }

  std::vector<std::size_t> indices(std::vector<std::size_t> value) {
    if (mode_ == Mode::capture) {
      indices_.push_back(value);
      return value;
    }
    if (index_cursor_ >= indices_.size()) throw ArgumentError("freeze tape exhausted (indices)");
    return indices_[index_cursor_++];
  }

 private:
  Mode mode_ = Mode::capture;
  std::vector<Tensor<T>> tensors_;
  std::vector<std::vector<std::size_t>> indices_;
  std::size_t tensor_cursor_ = 0;
  std::size_t index_cursor_ = 0;
};

/// Gradients of every enrolled tensor reachable from the loss.
template <typename T>
class Gradients {
 public:
  const Tensor<T>* of(Var<T> v) const {
    auto it = by_id_.find(v.id);
    return it == by_id_.end() ? nullptr : &it->second;
  }
  const Tensor<T>* of(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : &it->second;
  }
  const std::map<std::string, Tensor<T>>& named() const { return by_name_; }
  std::size_t size() const { return by_id_.size(); }

 private:
  friend class DiffContext<T>;
  std::map<std::uint32_t, Tensor<T>> by_id_;
  std::map<std::string, Tensor<T>> by_name_;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so walking
/// the tape backwards is a valid topological order and gradient
/// accumulation order is deterministic. Not thread-safe.
template <typename T>
class DiffContext {
 public:
  using BackwardFn = std::function<void(DiffContext&, std::uint32_t self)>;

  explicit DiffContext(bool record = true) : record_(record) {}
  DiffContext(const DiffContext&) = delete;
  DiffContext& operator=(const DiffContext&) = delete;

  bool recording() const { return record_; }

  /// Value that never receives a gradient.
  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, false, {}, {}, "constant"); }

  /// Leaf enrolled in differentiation when value.requires_grad() is set.
  Var<T> input(Tensor<T> value) {
    const bool enrolled = record_ && value.requires_grad();
    return push(std::move(value), enrolled, enrolled, {}, {}, "input");
  }

  /// Named leaf referring to externally owned storage (model parameters).
  /// The tensor must outlive the context. Repeated requests for the same
  /// name return the same node.
  Var<T> param(const std::string& name, const Tensor<T>& ref, bool trainable = true) {
    auto it = params_.find(name);
    if (it != params_.end()) return Var<T>{this, it->second};
    const bool enrolled = record_ && trainable;
    Node node;
    node.ref = &ref;
    node.needs_grad = enrolled;
    node.enrolled = enrolled;
    node.name = name;
    nodes_.push_back(std::move(node));
    const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
    params_.emplace(name, id);
    return Var<T>{this, id};
  }

  /// Copy of the value with the gradient path cut. When a freeze tape is
  /// attached the value is captured or replayed.
  Var<T> detach(Var<T> v) {
    Tensor<T> value = v.value();
    if (tape_) value = tape_->tensor(std::move(value));
    return constant(std::move(value));
  }

  /// A value computed outside the graph that must stay fixed under
  /// finite-difference replay (targets derived from predictions).
  Tensor<T> freeze(Tensor<T> value) { return tape_ ? tape_->tensor(std::move(value)) : value; }

  /// Discrete decisions derived from values pass through here so replays
  /// reuse them.
  std::vector<std::size_t> decide(std::vector<std::size_t> indices) {
    return tape_ ? tape_->indices(std::move(indices)) : indices;
  }

  void attach_tape(std::shared_ptr<FreezeTape<T>> tape) { tape_ = std::move(tape); }

  const Tensor<T>& value(Var<T> v) const {
    const Node& n = nodes_[v.id];
    return n.ref ? *n.ref : n.owned;
  }

  bool needs_grad(Var<T> v) const { return nodes_[v.id].needs_grad; }
  bool needs_grad(std::uint32_t id) const { return nodes_[id].needs_grad; }

  std::size_t size() const { return nodes_.size(); }

  /// Appends an operation result. The backward function is stored only if
  /// some parent needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn,
                const char* op) {
    return record(std::move(value), std::vector<Var<T>>(parents), std::move(fn), op);
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& parents, BackwardFn fn,
                const char* op) {
    bool any = false;
    if (record_) {
      for (const auto& p : parents) any = any || nodes_[p.id].needs_grad;
    }
    return push(std::move(value), any, false, any ? std::move(fn) : BackwardFn{}, {}, op);
  }

  /// Zero-initialized gradient accumulator of a node.
  Tensor<T>& grad(std::uint32_t id) {
    Node& n = nodes_[id];
    const Tensor<T>& v = value(Var<T>{this, id});
    if (n.grad.shape() != v.shape()) n.grad = Tensor<T>(v.shape());
    return n.grad;
  }
  Tensor<T>& grad(Var<T> v) { return grad(v.id); }
  bool has_grad(std::uint32_t id) const { return nodes_[id].grad_ready; }

  Gradients<T> backward(Var<T> loss) {
    if (loss.value().numel() != 1) {
      throw ArgumentError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    Gradients<T> out;
    if (!nodes_[loss.id].needs_grad) return out;
    for (auto& n : nodes_) {
      n.grad_ready = false;
      n.grad = Tensor<T>();
    }
    grad(loss.id)[0] = T(1);
    nodes_[loss.id].grad_ready = true;
    for (std::uint32_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.needs_grad || !n.grad_ready) continue;
      if (n.fn) {
        n.fn(*this, id);
      }
      if (n.enrolled) {
        out.by_id_.emplace(id, n.grad);
        if (!n.name.empty()) out.by_name_.emplace(n.name, n.grad);
      }
    }
    return out;
  }

  /// Accumulator of a parent during backward; marks it as reached.
  Tensor<T>& accumulate_into(Var<T> parent) {
    Tensor<T>& g = grad(parent.id);
    nodes_[parent.id].grad_ready = true;
    return g;
  }

  /// Gradient flowing into node `self` during backward.
  const Tensor<T>& upstream(std::uint32_t self) const { return nodes_[self].grad; }

  /// Call before reusing the context for a fresh forward pass.
  void clear() {
    nodes_.clear();
    params_.clear();
  }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* ref = nullptr;
    Tensor<T> grad;
    BackwardFn fn;
    std::string name;
    bool needs_grad = false;
    bool enrolled = false;
    bool grad_ready = false;
  };

  Var<T> push(Tensor<T> value, bool needs_grad, bool enrolled, BackwardFn fn, std::string name,
              const char* op) {
    if (!value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
    Node node;
    node.owned = std::move(value);
    node.needs_grad = needs_grad;
    node.enrolled = enrolled;
    node.fn = std::move(fn);
    node.name = std::move(name);
    nodes_.push_back(std::move(node));
    return Var<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  bool record_;
  std::deque<Node> nodes_;
  std::unordered_map<std::string, std::uint32_t> params_;
  std::shared_ptr<FreezeTape<T>> tape_;
};

}  // namespace efh
