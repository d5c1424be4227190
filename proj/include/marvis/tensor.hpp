#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace marvis {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename Scalar>
struct TensorNode {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Array value;
  Array grad;  // empty until something accumulates into it
  bool requires_grad = false;
  bool backward_done = false;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  // Reads this node's grad and adds into the grads of `inputs`.
  std::function<void(TensorNode&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  Array& grad_buffer() {
    if (grad.size() != value.size()) grad = Array::Zero(value.size());
    return grad;
  }
};

/// N-dimensional row-major array with reverse-mode autodiff. Copies share
/// the underlying node; use clone() for a deep copy.
template <typename Scalar>
class Tensor {
 public:
  using Node = TensorNode<Scalar>;
  using Array = typename Node::Array;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, Scalar value, bool requires_grad = false);
  static Tensor from_values(const Shape& shape, Array values, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape.at(i < 0 ? i + rank() : i); }
  Eigen::Index numel() const { return node_->value.size(); }

  Array& values() { return node_->value; }
  const Array& values() const { return node_->value; }
  Scalar item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  /// Gradient buffer; zeros when nothing has been accumulated yet.
  const Array& grad() const { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Array(); }

  /// New leaf holding a copy of the values.
  Tensor clone(bool requires_grad = false) const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Whether newly created op results record graph edges (thread-local).
bool grad_enabled();

/// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Reverse-mode sweep from a scalar loss. Leaf grads accumulate across calls
/// until zero_grad(); the graph is released afterwards, so a second call on
/// the same loss throws StateError. A non-scalar loss throws ShapeError and a
/// loss with no differentiable inputs throws StateError.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss);

namespace detail {

/// Wraps an op result. Edges and the backward rule are kept only when grad
/// mode is on and some input requires grad.
template <typename Scalar>
Tensor<Scalar> make_result(Shape shape, typename Tensor<Scalar>::Array value,
                           const std::vector<Tensor<Scalar>>& inputs,
                           std::function<void(TensorNode<Scalar>&)> backward_fn);

/// Accumulate target into input `i`'s grad when that input requires grad.
template <typename Scalar>
typename TensorNode<Scalar>::Array* input_grad(TensorNode<Scalar>& self, std::size_t i) {
  auto& in = self.inputs[i];
  return in->requires_grad ? &in->grad_buffer() : nullptr;
}

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace marvis
