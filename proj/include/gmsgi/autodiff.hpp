#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gmsgi/tensor.hpp"

namespace gmsgi {

enum class OpKind {
  leaf,
  add,
  sub,
  mul,
  divide,
  scalar_scale,
  scalar_add,
  pow_scalar,
  exp,
  log,
  sqrt,
  relu,
  sigmoid,
  matmul,
  softmax,
  mean_axis,
  sum_all,
  reshape,
  permute,
  conv2d,
  avgpool2d,
  maxpool2d,
  batchnorm2d,
  dropout,
  unfold,
  fold,
  global_avg_pool,
  linear,
  upsample_nearest,
  involution,
  l2_normalize_rows,
  cross_entropy_logits,
  scale_by,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::divide: return "divide";
    case OpKind::scalar_scale: return "scalar_scale";
    case OpKind::scalar_add: return "scalar_add";
    case OpKind::pow_scalar: return "pow_scalar";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::sqrt: return "sqrt";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::matmul: return "matmul";
    case OpKind::softmax: return "softmax";
    case OpKind::mean_axis: return "mean_axis";
    case OpKind::sum_all: return "sum_all";
    case OpKind::reshape: return "reshape";
    case OpKind::permute: return "permute";
    case OpKind::conv2d: return "conv2d";
    case OpKind::avgpool2d: return "avgpool2d";
    case OpKind::maxpool2d: return "maxpool2d";
    case OpKind::batchnorm2d: return "batchnorm2d";
    case OpKind::dropout: return "dropout";
    case OpKind::unfold: return "unfold";
    case OpKind::fold: return "fold";
    case OpKind::global_avg_pool: return "global_avg_pool";
    case OpKind::linear: return "linear";
    case OpKind::upsample_nearest: return "upsample_nearest";
    case OpKind::involution: return "involution";
    case OpKind::l2_normalize_rows: return "l2_normalize_rows";
    case OpKind::cross_entropy_logits: return "cross_entropy_logits";
    case OpKind::scale_by: return "scale_by";
  }
  return "?";
}

namespace detail {

inline thread_local int no_grad_depth = 0;

}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

struct NoGrad {
  NoGrad() { ++detail::no_grad_depth; }
  ~NoGrad() { --detail::no_grad_depth; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

template <typename S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;  // allocated on first use, same shape as value
  OpKind kind = OpKind::leaf;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // reads this->grad, accumulates into parents

  void ensure_grad() {
    if (grad.data.empty()) grad = Tensor<S>(value.shape);
  }
  void add_grad(const Tensor<S>& g) {
    ensure_grad();
    for (std::size_t i = 0; i < g.data.size(); ++i) grad.data[i] += g.data[i];
  }
};

// Shared handle to a tape node; both leaves (inputs, parameters) and op results.
template <typename S>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<S>> n) : n_(std::move(n)) {}

  static Var leaf(Tensor<S> value, bool requires_grad = false) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  bool defined() const { return n_ != nullptr; }
  const Tensor<S>& value() const { return n_->value; }
  Tensor<S>& value() { return n_->value; }
  Tensor<S>& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  bool requires_grad() const { return n_->requires_grad; }
  OpKind kind() const { return n_->kind; }
  std::shared_ptr<Node<S>> node() const { return n_; }

 private:
  std::shared_ptr<Node<S>> n_;
};

// Every operator output passes through here: finiteness is part of the op
// contract, and the tape node is only recorded when a grad is actually needed.
template <typename S, typename F>
Var<S> make_op(OpKind kind, Tensor<S> out, std::vector<Var<S>> inputs, F&& backward_fn) {
  if (!out.all_finite())
    throw NumericError(std::string("op '") + op_name(kind) + "' produced a non-finite value");
  bool rg = false;
  if (grad_enabled())
    for (const auto& in : inputs)
      if (in.defined() && in.requires_grad()) rg = true;
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(out);
  n->kind = kind;
  n->requires_grad = rg;
  if (rg) {
    for (auto& in : inputs)
      if (in.defined()) n->parents.push_back(in.node());
    n->backward_fn = std::forward<F>(backward_fn);
  }
  return Var<S>(std::move(n));
}

// Reverse topological order from root; every node visited exactly once.
template <typename S>
std::vector<Node<S>*> toposort(Node<S>* root) {
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<std::pair<Node<S>*, std::size_t>> stack;
  stack.push_back({root, 0});
  seen.insert(root);
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<S>* p = n->parents[i++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  return order;  // post-order: root last
}

template <typename S>
void backward(const Var<S>& loss) {
  if (loss.value().numel() != 1)
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.value().shape));
  if (!loss.requires_grad()) return;
  Node<S>* root = loss.node().get();
  auto order = toposort(root);
  root->ensure_grad();
  root->grad.data[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

template <typename S>
struct Parameter {
  std::string name;
  Var<S> var;
};

// Named parameters plus non-learnable buffers (batchnorm running statistics).
// Registration order is the checkpoint order.
template <typename S>
class ParameterStore {
 public:
  Var<S> add(const std::string& name, Tensor<S> init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    Var<S> v = Var<S>::leaf(std::move(init), true);
    index_[name] = params_.size();
    params_.push_back({name, v});
    return v;
  }

  void add_buffer(const std::string& name, std::shared_ptr<Tensor<S>> buf) {
    for (auto& [n, b] : buffers_)
      if (n == name) throw ConfigError("duplicate buffer name: " + name);
    buffers_.emplace_back(name, std::move(buf));
  }

  const std::vector<Parameter<S>>& params() const { return params_; }
  const std::vector<std::pair<std::string, std::shared_ptr<Tensor<S>>>>& buffers() const {
    return buffers_;
  }

  Var<S> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no parameter named " + name);
    return params_[it->second].var;
  }

  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.value().numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) {
      auto& g = p.var.grad();
      std::fill(g.data.begin(), g.data.end(), S(0));
    }
  }

 private:
  std::vector<Parameter<S>> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::pair<std::string, std::shared_ptr<Tensor<S>>>> buffers_;
};

// Populates grads of every parameter reachable from `loss`; unreachable ones
// stay zero. Returns the name -> grad table.
template <typename S>
std::map<std::string, const Tensor<S>*> backward(const Var<S>& loss, ParameterStore<S>& store,
                                                 bool accumulate = false) {
  if (!accumulate) store.zero_grad();
  backward(loss);
  std::map<std::string, const Tensor<S>*> table;
  for (auto& p : store.params()) table[p.name] = &p.var.grad();
  return table;
}

// Central-difference oracle: (f(x+h*e_i) - f(x-h*e_i)) / (2h) per element.
// Rejects f that does not reproduce its own value on repeated evaluation.
template <typename S>
Tensor<S> finite_diff_grad(const std::function<S(const Tensor<S>&)>& f, const Tensor<S>& x, S h) {
  if (!(h > S(0))) throw NumericError("finite_diff_grad requires h > 0");
  S f0 = f(x);
  S f1 = f(x);
  if (f0 != f1) throw NumericError("finite_diff_grad: f is not deterministic");
  Tensor<S> g(x.shape);
  Tensor<S> xp = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    S orig = xp.data[i];
    xp.data[i] = orig + h;
    S fp = f(xp);
    xp.data[i] = orig - h;
    S fm = f(xp);
    xp.data[i] = orig;
    g.data[i] = (fp - fm) / (S(2) * h);
  }
  return g;
}

}  // namespace gmsgi
