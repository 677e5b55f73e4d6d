#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "visforce/error.hpp"
#include "visforce/tensor.hpp"

namespace visforce {

/// How a parameter is drawn at model initialization.
enum class Init {
  zero,       // biases
  fan_in,     // uniform(±sqrt(6 / fan_in)), conv and dense weights
  recurrent,  // uniform(±1 / sqrt(fan_in)), LSTM matrices
};

/// Learnable tensor with its accumulated gradient.
struct Parameter {
  std::string id;
  Tensor value;
  Tensor grad;
  Init init = Init::zero;
  std::size_t fan_in = 0;

  Parameter(std::string name, Tensor start, Init how = Init::zero, std::size_t fan = 0)
      : id(std::move(name)), value(std::move(start)), grad(value.shape(), 0.0), init(how), fan_in(fan) {}

  void zero_grad() { grad.fill(0.0); }
};

/// Parameters keyed by hierarchical id ("backbone/conv1_1/w"). Iteration is in id order,
/// which fixes the checkpoint layout and the optimizer update order.
class ParameterSet {
 public:
  Parameter& add(std::string id, Tensor value, Init how = Init::zero, std::size_t fan_in = 0) {
    auto [it, inserted] = params_.try_emplace(id, id, std::move(value), how, fan_in);
    if (!inserted) throw ContractViolation("duplicate parameter id '" + id + "'");
    return it->second;
  }

  Parameter& at(const std::string& id) {
    auto it = params_.find(id);
    if (it == params_.end()) throw ContractViolation("unknown parameter id '" + id + "'");
    return it->second;
  }
  const Parameter& at(const std::string& id) const { return const_cast<ParameterSet*>(this)->at(id); }

  bool contains(const std::string& id) const { return params_.count(id) != 0; }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [id, p] : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [id, p] : params_) p.zero_grad();
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Parameter> params_;
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape& tape() const { return *tape_; }
  std::size_t index() const { return index_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

/// Computation record for reverse-mode differentiation.
///
/// Every operator appends one node holding its output value and a closure that
/// propagates the node's adjoint to its parents. backward() replays the closures
/// once each, newest first. Parameters are recorded once per tape; their adjoints
/// are added into Parameter::grad.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
    return Var(this, nodes_.size() - 1);
  }

  Var parameter(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
    nodes_.push_back(Node{p.value, {}, {}, &p, true});
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return Var(this, nodes_.size() - 1);
  }

  /// Appends an operator output. The closure is kept only when some parent needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || check_owned(p).requires_grad;
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : BackwardFn{}, nullptr, needs});
    return Var(this, nodes_.size() - 1);
  }

  Var record(Tensor value, std::span<const Var> parents, BackwardFn fn) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || check_owned(p).requires_grad;
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : BackwardFn{}, nullptr, needs});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t i) const { return nodes_[i].value; }
  bool requires_grad(std::size_t i) const { return nodes_[i].requires_grad; }
  bool requires_grad(const Var& v) const { return nodes_[v.index()].requires_grad; }

  /// Adjoint of node i (zero-initialized on first access).
  Tensor& grad(std::size_t i) {
    Node& n = nodes_[i];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

  bool has_grad(std::size_t i) const { return !nodes_[i].grad.empty(); }

  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates adjoints to every parameter on the tape.
  void backward(const Var& loss) {
    const Node& root = check_owned(loss);
    if (root.value.size() != 1) {
      throw ContractViolation("backward() needs a scalar loss, got shape " + shape_str(root.value.shape()));
    }
    grad(loss.index())[0] += 1.0;
    for (std::size_t i = loss.index() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty()) continue;
      if (n.param != nullptr) {
        auto g = n.param->grad.data();
        auto src = n.grad.data();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += src[k];
      } else if (n.backward) {
        n.backward(*this, i);
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    Parameter* param;
    bool requires_grad;
  };

  const Node& check_owned(const Var& v) const {
    if (&v.tape() != this || v.index() >= nodes_.size()) {
      throw ContractViolation("variable does not belong to this tape");
    }
    return nodes_[v.index()];
  }

  // deque keeps references to node values valid while new nodes are appended
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(index_); }

}  // namespace visforce
