#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kpt/error.hpp"

namespace kpt {

/// Extents of a tensor, outermost first. An empty shape denotes a scalar.
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Graph construction is skipped while a NoGradGuard is alive on the
/// current thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty when absent
  bool requires_grad = false;
  bool is_leaf = true;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> inputs;
  // Propagates this node's grad into the grads of `inputs`.
  std::function<void(TensorNode&)> backward;

  // Returns the grad buffer, allocating zeros on first use.
  std::vector<T>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Shared handle to a node in the reverse-mode graph. Copies alias the same
/// storage; ops never mutate their inputs.
template <class T>
class BasicTensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  BasicTensor() = default;
  explicit BasicTensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor from_data(Shape shape, std::vector<T> data,
                               bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Intended for leaves (parameters, buffers, inputs) only.
  std::span<T> mutable_data() { return node_->data; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad();

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value);
  bool is_leaf() const { return node_->is_leaf; }
  std::string_view op() const { return node_->op; }

  T item() const;

  /// Reverse pass from a single-element tensor. Leaf grads accumulate
  /// across calls until zero_grad(); intermediate grads are reset per call.
  void backward() const;

  /// Fresh leaf holding a copy of the values.
  BasicTensor detach() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Throws NumericError naming `context` and the first offending index.
template <class T>
void check_finite(const BasicTensor<T>& t, std::string_view context);

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;

}  // namespace kpt
