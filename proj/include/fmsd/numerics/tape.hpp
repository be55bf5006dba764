#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "fmsd/numerics/tensor.hpp"

namespace fmsd::nn {

/// A named trainable tensor with its gradient accumulator.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(T{0}); }
};

/// Owns every parameter of a model, in creation order. References handed out stay valid.
template <typename T>
class ParameterStore {
 public:
  Parameter<T>& create(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_.emplace(name, params_.size());
    params_.push_back(std::make_unique<Parameter<T>>(name, std::move(init)));
    return *params_.back();
  }

  Parameter<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return *params_[it->second];
  }
  const Parameter<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return *params_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const noexcept { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

template <typename T>
class Tape;

/// Handle to a node recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  T item() const { return value().item(); }
};

/// Linear record of primitive ops. Inputs always precede outputs, and backward() visits
/// nodes in exact reverse order. A branch that never runs leaves no node, so parameters
/// behind it receive no gradient at all.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>& out_grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var<T> constant(Tensor<T> value, const char* op = "constant") {
    check_finite(value, op);
    Node n;
    n.own = std::move(value);
    n.op = op;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// Leaf for a trainable parameter. Each parameter appears at most once per tape.
  Var<T> param(Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
    Node n;
    n.ext = &p.value;
    n.op = "param";
    if (grad_enabled_) {
      n.requires_grad = true;
      Parameter<T>* target = &p;
      n.backward = [target](Tape&, const Tensor<T>& g) {
        auto dst = target->grad.data();
        auto src = g.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      };
    }
    nodes_.push_back(std::move(n));
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  /// Records an op output. The backward closure is dropped when no input needs gradients.
  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<std::size_t> inputs,
                Backward backward) {
    return record_impl(op, std::move(value), std::span<const std::size_t>(inputs.begin(), inputs.size()),
                       std::move(backward));
  }
  Var<T> record(const char* op, Tensor<T> value, const std::vector<std::size_t>& inputs,
                Backward backward) {
    return record_impl(op, std::move(value), std::span<const std::size_t>(inputs), std::move(backward));
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value(); }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::string& op_name(std::size_t id) const { return nodes_[id].op; }

  /// Gradient accumulator of a node, zero-allocated on first access.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value().shape());
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  void backward(Var<T> root) {
    if (root.tape != this) throw std::invalid_argument("backward: variable from another tape");
    if (!grad_enabled_) throw std::logic_error("backward on an inference tape");
    if (value(root.id).size() != 1) throw NumericError("backward root must be a scalar");
    grad(root.id).fill(T{1});
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
      if (!n.grad.all_finite()) throw NumericError("non-finite gradient flowing out of op '" + n.op + "'");
    }
  }

 private:
  struct Node {
    Tensor<T> own;
    const Tensor<T>* ext = nullptr;
    Tensor<T> grad;
    Backward backward;
    std::string op;
    bool requires_grad = false;

    const Tensor<T>& value() const { return ext ? *ext : own; }
  };

  static void check_finite(const Tensor<T>& v, const char* op) {
    if (!v.all_finite()) throw NumericError(std::string("non-finite value produced by op '") + op + "'");
  }

  Var<T> record_impl(const char* op, Tensor<T> value, std::span<const std::size_t> inputs, Backward backward) {
    check_finite(value, op);
    Node n;
    n.own = std::move(value);
    n.op = op;
    if (grad_enabled_) {
      for (auto id : inputs) {
        if (nodes_[id].requires_grad) {
          n.requires_grad = true;
          break;
        }
      }
    }
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
  bool grad_enabled_;
};

}  // namespace fmsd::nn
