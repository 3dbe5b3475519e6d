#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ekd::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand shapes do not conform.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a forward operation produces NaN or Inf from finite inputs.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when an API precondition is violated by the caller.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  // Empty until a backward pass reaches this node.
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads self.grad and accumulates into the grads of self.inputs.
  std::function<void(Node& self)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  void accumulate(std::span<const T> g);
};

/// Shared handle to a node of the dynamic computation graph.
///
/// Copies share the underlying node. Values are immutable once an operation
/// has produced them; only leaves (parameters, inputs) may be mutated in place,
/// and only between passes.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  /// Writable view of a leaf's values (optimizer updates, checkpoint loads).
  std::span<T> mutable_data();
  T item() const;
  T at(std::size_t flat_index) const { return node_->data[flat_index]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value);
  bool is_leaf() const { return node_->is_leaf(); }
  const char* op_name() const { return node_->op; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void clear_grad() { node_->grad.clear(); }

  /// Value-identical leaf that never propagates gradients.
  Tensor detach() const;
  /// Independent deep copy as a leaf, preserving requires_grad.
  Tensor clone() const;

  const std::shared_ptr<Node<T>>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node<T>> node_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

/// Disables recording for the lifetime of the scope on the current thread.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  bool previous_;
};

bool grad_recording_enabled();

/// Ordered record of the differentiable operations reachable from a root.
///
/// Entries are in topological order: every operation appears after the
/// operations that produced its inputs.
template <typename T>
class Tape {
 public:
  static Tape collect(const Tensor<T>& root);

  std::size_t size() const { return ops_.size(); }
  bool empty() const { return ops_.empty(); }
  const std::vector<Node<T>*>& operations() const { return ops_; }

  /// Seeds d(root)/d(root) = 1 and runs every recorded rule once, in reverse.
  void backward(const Tensor<T>& root) const;

 private:
  std::vector<Node<T>*> ops_;
};

/// Accumulates d(root)/d(t) into every reachable tensor with requires_grad.
template <typename T>
void backward(const Tensor<T>& root);

}  // namespace ekd::ad
