#include "kpt/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace kpt {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <class T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <class T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <class T>
BasicTensor<T> BasicTensor<T>::from_data(Shape shape, std::vector<T> data,
                                         bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw UsageError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw UsageError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return BasicTensor(std::move(node));
}

template <class T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

template <class T>
void BasicTensor<T>::zero_grad() {
  if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <class T>
void BasicTensor<T>::set_requires_grad(bool value) {
  if (!node_->is_leaf) throw UsageError("requires_grad can only be changed on leaf tensors");
  node_->requires_grad = value;
}

template <class T>
T BasicTensor<T>::item() const {
  if (numel() != 1) {
    throw UsageError("item() needs a single-element tensor, got " + shape_str(shape()));
  }
  return node_->data[0];
}

template <class T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return from_data(node_->shape, node_->data, false);
}

template <class T>
void BasicTensor<T>::backward() const {
  if (numel() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) {
    throw UsageError("backward() on a tensor that does not require grad");
  }

  // Iterative post-order DFS; each node appears once in `order`.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Every node receives this pass's gradient in a zeroed buffer; leaves then
  // add it to what they held before, so repeated passes accumulate exactly.
  std::vector<std::vector<T>> held;
  for (Node* node : order) {
    if (node->is_leaf) held.push_back(std::move(node->grad));
    node->grad.assign(node->data.size(), T(0));
  }
  node_->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->is_leaf && node->backward) node->backward(*node);
  }
  auto previous = held.begin();
  for (Node* node : order) {
    if (!node->is_leaf) continue;
    const auto& before = *previous++;
    if (before.size() == node->grad.size()) {
      for (std::size_t i = 0; i < before.size(); ++i) node->grad[i] = before[i] + node->grad[i];
    }
  }
}

template <class T>
void check_finite(const BasicTensor<T>& t, std::string_view context) {
  const auto values = t.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << "non-finite value " << values[i] << " in " << context << " at flat index " << i
         << " (shape " << shape_str(t.shape()) << ")";
      throw NumericError(os.str());
    }
  }
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template void check_finite(const BasicTensor<float>&, std::string_view);
template void check_finite(const BasicTensor<double>&, std::string_view);

}  // namespace kpt
