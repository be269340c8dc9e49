#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <unordered_set>
#include <utility>

#include "mmfuse/common.hpp"

namespace mmfuse {

// ----------------------------------------------------------------------------
// Grad mode: a thread-local switch so inference and numeric probes skip graph
// construction entirely.
// ----------------------------------------------------------------------------

struct GradMode {
  static bool& flag() {
    thread_local bool enabled = true;
    return enabled;
  }
  static bool enabled() { return flag(); }
  static void set(bool on) { flag() = on; }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// ----------------------------------------------------------------------------
// Tensor: dense row-major float64 N-d array with optional tape participation.
//
// A Tensor is a cheap handle onto a shared node. Nodes created by ops record
// their parents and a backward closure; backward(loss) replays them in
// reverse topological order. Leaves (parameters, inputs) have no closure.
// ----------------------------------------------------------------------------

class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily, same length as data
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
      if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
  };

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad, /*fill=*/0.0);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad, value);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from_data(Shape{}, std::vector<double>{value}, requires_grad);
  }

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false,
                          double fill = 0.0) {
    std::size_t n = numel(shape);
    for (std::size_t e : shape) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (data.empty()) data.assign(n, fill);
    if (data.size() != n) {
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    }
    for (double v : data) {
      if (!std::isfinite(v)) throw NonFiniteError("tensor constructed with non-finite value");
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
    std::vector<double> d(numel(shape));
    for (double& v : d) v = rng.uniform(lo, hi);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor randn(Shape shape, Rng& rng, bool requires_grad = false) {
    std::vector<double> d(numel(shape));
    for (double& v : d) v = rng.normal();
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }

  const std::vector<double>& data() const { return node_->data; }
  std::vector<double>& mutable_data() { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }
  const std::vector<double>& grad() const {
    if (!has_grad()) throw ContractError("tensor has no gradient; run backward first");
    return node_->grad;
  }
  void zero_grad() {
    if (node_) node_->grad.assign(node_->data.size(), 0.0);
  }

  double value() const {
    if (size() != 1) throw ContractError("value() requires a scalar, got shape " + shape_str(shape()));
    return node_->data[0];
  }

  double at(std::initializer_list<std::size_t> idx) const {
    return node_->data[flat_index(idx)];
  }

  std::size_t flat_index(std::initializer_list<std::size_t> idx) const {
    const Shape& s = shape();
    if (idx.size() != s.size()) throw ContractError("index rank mismatch for " + shape_str(s));
    std::size_t flat = 0, axis = 0;
    for (std::size_t i : idx) {
      if (i >= s[axis]) throw ContractError("index out of bounds on axis " + std::to_string(axis));
      flat = flat * s[axis] + i;
      ++axis;
    }
    return flat;
  }

  // Same data, fresh leaf node; no tape linkage.
  Tensor detached(bool requires_grad = false) const {
    return from_data(shape(), data(), requires_grad);
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// ----------------------------------------------------------------------------
// Op construction and backward
// ----------------------------------------------------------------------------

inline void check_finite(const std::vector<double>& data, const char* op) {
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string("op '") + op + "' produced a non-finite value");
    }
  }
}

// Builds an op result node. The backward closure receives the output node
// (with grad populated) and must accumulate into the parents' grads.
inline Tensor make_op(const char* name, Shape shape, std::vector<double> data,
                      std::vector<Tensor> parents, std::function<void(Tensor::Node&)> backward) {
  check_finite(data, name);
  Tensor out = Tensor::from_data(std::move(shape), std::move(data));
  bool needs_grad = false;
  if (GradMode::enabled()) {
    for (const Tensor& p : parents) needs_grad = needs_grad || p.requires_grad();
  }
  if (needs_grad) {
    auto node = out.node();
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const Tensor& p : parents) {
      if (p.requires_grad()) node->parents.push_back(p.node());
    }
    node->backward_fn = std::move(backward);
  }
  return out;
}

inline void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward on a tensor that does not require grad");
  }

  using Node = Tensor::Node;
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS over grad-requiring parents.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, child] = stack.back();
    if (child < node->parents.size()) {
      Node* next = node->parents[child++].get();
      if (next->requires_grad && !visited.count(next)) {
        visited.insert(next);
        stack.emplace_back(next, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn) {
      node->ensure_grad();
      node->backward_fn(*node);
    }
  }
}

inline void zero_grad(std::vector<Tensor>& params) {
  for (Tensor& p : params) p.zero_grad();
}

}  // namespace mmfuse
