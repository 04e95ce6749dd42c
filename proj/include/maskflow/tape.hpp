#pragma once

#include <deque>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskflow/tensor.hpp"

namespace maskflow {

// A trainable tensor with its accumulated gradient.
template <typename T>
struct BasicParameter {
  BasicTensor<T> value;
  BasicTensor<T> grad;
  bool requires_grad = true;

  void zero_grad() {
    if (!grad.defined() || grad.shape() != value.shape()) {
      grad = BasicTensor<T>::zeros(value.shape());
    } else {
      grad.fill(T{0});
    }
  }
};

// Name-ordered parameter collection. Iteration order is lexicographic so
// serialization and optimizer state never depend on insertion order.
template <typename T>
class BasicParamStore {
 public:
  BasicParameter<T>& add(const std::string& name, BasicTensor<T> value, bool requires_grad = true) {
    auto [it, inserted] = params_.try_emplace(name);
    if (!inserted) throw std::invalid_argument("duplicate parameter " + name);
    it->second.value = std::move(value);
    it->second.requires_grad = requires_grad;
    it->second.zero_grad();
    return it->second;
  }

  BasicParameter<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
  }
  const BasicParameter<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  std::int64_t total_size() const {
    std::int64_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.numel();
    return n;
  }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, BasicParameter<T>> params_;
};

using Parameter = BasicParameter<float>;
using ParamStore = BasicParamStore<float>;

template <typename T>
class BasicTape;

// Handle to a value recorded on a tape.
template <typename T>
class BasicVar {
 public:
  BasicVar() = default;
  BasicVar(BasicTape<T>* tape, int id) : tape_(tape), id_(id) {}

  BasicTape<T>& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const BasicTensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::int64_t dim(int axis) const { return value().dim(axis); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  BasicTape<T>* tape_ = nullptr;
  int id_ = -1;
};

// Ordered record of primitive applications. Nodes are appended in execution
// order, which is a topological order; backward walks them once in reverse.
template <typename T>
class BasicTape {
 public:
  using Var = BasicVar<T>;
  using Tensor = BasicTensor<T>;
  // Receives the tape and the node id; reads grad(id) and accumulates into
  // the grad buffers of the node's inputs.
  using BackwardFn = std::function<void(BasicTape&, int)>;

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), {}, nullptr, false, nullptr); }

  Var leaf(Tensor value, bool requires_grad = true) {
    return push(std::move(value), {}, nullptr, requires_grad, nullptr);
  }

  // Records a parameter; its gradient is accumulated into p.grad on backward.
  Var param(BasicParameter<T>& p) { return push(p.value, {}, nullptr, p.requires_grad, &p); }

  // Records the output of a primitive. The node requires grad iff any input does.
  Var record(Tensor value, std::vector<int> inputs, BackwardFn fn) {
    bool rg = false;
    for (int i : inputs) rg = rg || nodes_[static_cast<std::size_t>(i)].requires_grad;
    if (!rg) return push(std::move(value), {}, nullptr, false, nullptr);
    return push(std::move(value), std::move(inputs), std::move(fn), true, nullptr);
  }

  const Tensor& value(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  bool requires_grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).requires_grad; }
  const std::vector<int>& inputs(int id) const { return nodes_.at(static_cast<std::size_t>(id)).inputs; }

  // Gradient buffer of a node, allocated on first use. Null when the node
  // does not require grad, so backward rules can skip that input.
  Tensor* grad_buffer(int id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return nullptr;
    if (!n.grad.defined()) n.grad = Tensor::zeros(n.value.shape());
    return &n.grad;
  }

  const Tensor& grad(int id) const {
    const auto& n = nodes_.at(static_cast<std::size_t>(id));
    if (!n.grad.defined()) {
      if (!n.zero.defined()) n.zero = Tensor::zeros(n.value.shape());
      return n.zero;
    }
    return n.grad;
  }
  const Tensor& grad(const Var& v) const { return grad(v.id()); }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void backward(const Var& loss) {
    if (loss.valid() && &loss.tape() != this) throw std::invalid_argument("loss recorded on another tape");
    if (consumed_) throw std::logic_error("backward: tape already consumed");
    const auto& lv = value(loss.id());
    if (lv.numel() != 1) throw ShapeError("backward: loss must be scalar, got shape " + to_string(lv.shape()));
    consumed_ = true;
    if (!requires_grad(loss.id())) {
      flush_params();
      return;
    }
    grad_buffer(loss.id())->fill(T{1});
    for (int id = loss.id(); id >= 0; --id) {
      auto& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.backward || !n.grad.defined()) continue;
      n.backward(*this, id);
    }
    flush_params();
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    mutable Tensor zero;
    std::vector<int> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    BasicParameter<T>* param = nullptr;
  };

  Var push(Tensor value, std::vector<int> inputs, BackwardFn fn, bool rg, BasicParameter<T>* p) {
    Node n;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
    n.requires_grad = rg;
    n.param = p;
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  void flush_params() {
    for (auto& n : nodes_) {
      if (!n.param || !n.requires_grad) continue;
      auto& g = n.param->grad;
      if (!g.defined() || g.shape() != n.value.shape()) g = Tensor::zeros(n.value.shape());
      if (!n.grad.defined()) continue;
      auto dst = g.data();
      auto src = n.grad.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

using Var = BasicVar<float>;
using Tape = BasicTape<float>;

}  // namespace maskflow
