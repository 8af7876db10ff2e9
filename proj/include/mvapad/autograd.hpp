#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mvapad/tensor.hpp"

namespace mvapad {

enum class Mode { train, eval };

struct Node;

/// Reads `self.grad` and accumulates into the grads of `self.parents`.
using BackwardFn = std::function<void(Node& self)>;

/// One recorded value of a define-by-run graph.
struct Node {
  Tensor value;
  std::string op;
  std::vector<std::shared_ptr<Node>> parents;
  bool requires_grad = false;
  BackwardFn backward_fn;

  /// Gradient buffer, same shape and dtype as `value`; zero until written.
  Tensor& grad();
  bool has_grad() const { return !grad_.empty(); }
  void accumulate(const Tensor& g);
  void zero_grad() { grad_ = Tensor(); }

 private:
  Tensor grad_;
};

/// Handle to a graph node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  /// Direct write access for leaves (parameters). Throws on non-leaves.
  Tensor& mutable_value();
  const Tensor& grad() const { return node_->grad(); }
  void zero_grad() const { node_->zero_grad(); }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->parents.empty() && !node_->backward_fn; }
  const Shape& shape() const { return node_->value.shape(); }
  DType dtype() const { return node_->value.dtype(); }
  const std::string& op() const { return node_->op; }
  const std::shared_ptr<Node>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

/// Thread-local switch controlling whether new ops record their inputs.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Records an op result. When recording is disabled, or no parent requires a
/// gradient, the result is a constant leaf and `fn` is dropped.
Var make_op(Tensor value, std::string op, const std::vector<Var>& parents, BackwardFn fn);

/// Reverse-mode sweep from a scalar loss. Every reachable node that requires a
/// gradient receives the sum of the contributions of all of its consumers;
/// the loss itself is seeded with 1.
void backward(const Var& loss);

// Core differentiable ops. add/mul broadcast numpy-style (trailing dims
// aligned, size-1 dims stretched); everything else requires exact shapes.
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var relu(const Var& x);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var sum(const Var& x);
Var reshape(const Var& x, Shape shape);
/// Same value, cut from the graph.
Var detach(const Var& x);

Shape broadcast_shape(const Shape& a, const Shape& b);

namespace detail {
template <typename F>
decltype(auto) dispatch(DType dtype, F&& fn) {
  if (dtype == DType::f64) return fn(double{});
  return fn(float{});
}
}  // namespace detail

}  // namespace mvapad
