#include "ekd/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace ekd::ad {

namespace {
thread_local bool g_recording = true;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
void Node<T>::accumulate(std::span<const T> g) {
  if (grad.empty()) {
    grad.assign(g.begin(), g.end());
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto node = std::make_shared<Node<T>>();
  node->data.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape " + shape_str(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(shape()));
  }
  return node_->shape[axis];
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!is_leaf()) throw ContractError("mutable_data: only leaf tensors may be written");
  return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ContractError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  }
  return node_->data[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool value) {
  if (!is_leaf()) throw ContractError("set_requires_grad: only valid on leaves");
  node_->requires_grad = value;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  auto node = std::make_shared<Node<T>>();
  node->shape = node_->shape;
  node->data = node_->data;
  node->op = "detach";
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  auto node = std::make_shared<Node<T>>();
  node->shape = node_->shape;
  node->data = node_->data;
  node->requires_grad = node_->requires_grad;
  return Tensor(std::move(node));
}

NoGradScope::NoGradScope() : previous_(g_recording) { g_recording = false; }
NoGradScope::~NoGradScope() { g_recording = previous_; }

bool grad_recording_enabled() { return g_recording; }

template <typename T>
Tape<T> Tape<T>::collect(const Tensor<T>& root) {
  Tape tape;
  if (!root.defined()) return tape;
  // Iterative post-order DFS; inputs are visited in declaration order so the
  // resulting order is a pure function of the graph.
  std::unordered_set<const Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    if (!node->is_leaf()) tape.ops_.push_back(node);
    stack.pop_back();
  }
  return tape;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& root) const {
  if (root.numel() != 1) {
    throw ContractError("backward: root must be a scalar, got shape " + shape_str(root.shape()));
  }
  if (ops_.empty()) return;
  // Intermediate gradients are per-pass; only leaves accumulate across passes.
  for (Node<T>* node : ops_) node->grad.clear();
  root.node()->accumulate(std::vector<T>{T(1)});
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    Node<T>& node = **it;
    if (node.grad.empty()) continue;
    node.backward_fn(node);
  }
}

template <typename T>
void backward(const Tensor<T>& root) {
  if (root.numel() != 1) {
    throw ContractError("backward: root must be a scalar, got shape " + shape_str(root.shape()));
  }
  Tape<T>::collect(root).backward(root);
}

template struct Node<float>;
template struct Node<double>;
template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

}  // namespace ekd::ad
