#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

// Minimal reverse-mode differentiation over dense float64 arrays.
namespace nbeam::cnn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily
  bool requires_grad = false;
  std::string op;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

namespace detail {

inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

// Test hook: backward of nodes whose op matches is deliberately corrupted.
inline std::string& gradient_fault_op() {
  static std::string op;
  return op;
}

}  // namespace detail

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled()) { detail::grad_enabled() = false; }
  ~NoGradGuard() { detail::grad_enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<double> values) {
    if (numel(shape) != values.size()) {
      throw std::invalid_argument("Tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->op = "leaf";
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape) {
    const auto count = numel(shape);
    return constant(std::move(shape), std::vector<double>(count, 0.0));
  }

  static Tensor parameter(Shape shape, std::vector<double> values) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    t.node_->op = "param";
    return t;
  }

  static Tensor scalar(double v) { return constant({}, {v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  // Direct write access, for optimizers and checkpoint loading.
  std::span<double> mutable_values() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }

  double item() const {
    if (node_->value.size() != 1) throw std::logic_error("Tensor::item on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }
  const std::string& op() const { return node_->op; }

  Tensor detach() const { return constant(shape(), node_->value); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Creates the result node of an operation. Graph edges are recorded only
/// when recording is enabled and some input requires a gradient.
inline Tensor make_result(std::string op, Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                          std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = std::move(op);
  if (detail::grad_enabled()) {
    for (const auto& in : inputs) {
      if (in.defined() && in.requires_grad()) n->requires_grad = true;
    }
  }
  if (n->requires_grad) {
    for (const auto& in : inputs) n->parents.push_back(in.defined() ? in.node() : nullptr);
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

// Parent i of `self` if it exists and wants a gradient, with grad allocated.
inline Node* grad_target(Node& self, std::size_t i) {
  if (i >= self.parents.size() || !self.parents[i] || !self.parents[i]->requires_grad) return nullptr;
  self.parents[i]->ensure_grad();
  return self.parents[i].get();
}

/// Populates gradients of every leaf reachable from the scalar `loss`.
/// Leaf gradients accumulate across calls; intermediate gradients are reset.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1) throw std::invalid_argument("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p && p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (n->backward) n->grad.assign(n->value.size(), 0.0);
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] = 1.0;

  const std::string& fault = detail::gradient_fault_op();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward) continue;
    if (!fault.empty() && n->op == fault) {
      for (double& g : n->grad) g *= 1.01;
    }
    n->backward(*n);
  }
}

struct ComplexTensor {
  Tensor re;
  Tensor im;

  const Shape& shape() const { return re.shape(); }
};

}  // namespace nbeam::cnn
