#include "marvis/tensor.hpp"

#include <sstream>
#include <unordered_set>

#include "marvis/errors.hpp"

namespace marvis {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from_values(const Shape& shape, Array values, bool requires_grad) {
  if (shape_numel(shape) != values.size())
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(const Shape& shape, bool requires_grad) {
  return from_values(shape, Array::Zero(shape_numel(shape)), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::full(const Shape& shape, Scalar value, bool requires_grad) {
  return from_values(shape, Array::Constant(shape_numel(shape), value), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar value, bool requires_grad) {
  return full(Shape{}, value, requires_grad);
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::clone(bool requires_grad) const {
  return from_values(shape(), node_->value, requires_grad);
}

template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  using Node = TensorNode<Scalar>;
  if (!loss.defined()) throw StateError("backward on an undefined tensor");
  if (loss.numel() != 1)
    throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  Node* root = loss.node();
  if (root->backward_done) throw StateError("backward already ran on this graph");
  if (!root->requires_grad) throw StateError("loss is detached from every differentiable input");

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer().setConstant(Scalar(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && node->grad.size() == node->value.size()) node->backward_fn(*node);
  }
  for (Node* node : order) {
    if (!node->is_leaf()) {
      node->backward_fn = nullptr;
      node->inputs.clear();
      node->backward_done = true;
    }
  }
  root->backward_done = true;
}

namespace detail {

template <typename Scalar>
Tensor<Scalar> make_result(Shape shape, typename Tensor<Scalar>::Array value,
                           const std::vector<Tensor<Scalar>>& inputs,
                           std::function<void(TensorNode<Scalar>&)> backward_fn) {
  auto node = std::make_shared<TensorNode<Scalar>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& t : inputs) node->inputs.push_back(t.ptr());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor<Scalar>(std::move(node));
}

template Tensor<float> make_result(Shape, Tensor<float>::Array, const std::vector<Tensor<float>>&,
                                   std::function<void(TensorNode<float>&)>);
template Tensor<double> make_result(Shape, Tensor<double>::Array,
                                    const std::vector<Tensor<double>>&,
                                    std::function<void(TensorNode<double>&)>);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

}  // namespace marvis
