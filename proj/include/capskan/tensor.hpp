#pragma once

// Dense n-dimensional arrays with reverse-mode automatic differentiation.
//
// A Tensor<T> is a shared handle to an immutable value buffer plus optional
// gradient and lineage. Ops (see ops.hpp and friends) build a DAG; calling
// backward() on a scalar loss runs the tape in reverse topological order,
// accumulating (adding) gradients into every ancestor that requires them.
// T is float for training and double for finite-difference gradient checks.

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace capskan {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward_fn;  // null for leaves

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

}  // namespace detail

template <class T>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static Tensor filled(Shape shape, T v, bool requires_grad = false) {
    auto node = std::make_shared<detail::Node<T>>();
    node->value.assign(numel(shape), v);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (values.size() != numel(shape))
      throw std::invalid_argument("Tensor::from: " + std::to_string(values.size()) +
                                  " values for shape " + shape_str(shape));
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_ ? node_->value.size() : 0; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }

  std::span<const T> values() const { return node_->value; }
  // Mutable access is for construction, parameter initialization, and the
  // optimizer between steps; ops never modify their inputs.
  std::span<T> values_mut() { return node_->value; }

  T item() const {
    if (size() != 1)
      throw std::invalid_argument("Tensor::item: tensor has " + std::to_string(size()) +
                                  " elements");
    return node_->value[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const T> grad() const {
    if (!has_grad()) throw std::runtime_error("Tensor::grad: no gradient accumulated");
    return node_->grad;
  }
  std::span<T> grad_mut() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  const char* op_name() const { return node_->op; }
  const NodePtr& node() const { return node_; }

  // Reverse-mode accumulation from a scalar loss. Gradients add across
  // fan-out; leaves keep whatever gradient they already held.
  void backward() const {
    if (size() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  shape_str(shape()));
    if (!node_->requires_grad) return;  // nothing depends on parameters

    // Post-order DFS; order is deterministic because parent lists are.
    std::vector<detail::Node<T>*> order;
    std::unordered_set<detail::Node<T>*> seen;
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        detail::Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }

    node_->ensure_grad();
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node<T>* n = *it;
      if (n->backward_fn) n->backward_fn(*n);
    }
  }

  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

 private:
  NodePtr node_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Scoped autodiff switch: inside the guard, ops record no lineage, so
// inference passes stay flat even over parameters that require gradients.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {

// Builds an op node. Parents/backward are dropped when no parent requires a
// gradient, so inference graphs stay flat.
template <class T>
Tensor<T> make_op(Shape shape, std::vector<T> value, const char* op,
                  std::vector<Tensor<T>> parents,
                  std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (grad_enabled())
    for (const auto& p : parents) needs = needs || p.requires_grad();
  node->requires_grad = needs;
  if (needs) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

}  // namespace detail

}  // namespace capskan
