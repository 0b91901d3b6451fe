#include "vipa/numerics/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace vipa {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_string(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  for (T v : values) {
    if (!std::isfinite(v)) throw NumericError("tensor constructed with a non-finite value");
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T fill, bool requires_grad) {
  std::vector<T> v(shape_numel(shape), fill);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T v, bool requires_grad) {
  return Tensor(Shape{}, std::vector<T>{v}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  const auto& s = node_->shape;
  if (s.size() < 2) return 1;
  std::size_t n = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) n *= s[i];
  return n;
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  const auto& s = node_->shape;
  return s.empty() ? 1 : s.back();
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

template <typename T>
void Tensor<T>::zero_grad() {
  node_->grad.clear();
}

template <typename T>
std::span<T> grad_target(TensorNode<T>& node) {
  if (!node.requires_grad) return {};
  if (node.is_leaf() && t_grad_sink<T> != nullptr) {
    auto& buf = t_grad_sink<T>->buffers[&node];
    if (buf.size() != node.value.size()) buf.assign(node.value.size(), T(0));
    return buf;
  }
  if (node.grad.size() != node.value.size()) node.grad.assign(node.value.size(), T(0));
  return node.grad;
}

template <typename T>
void Tensor<T>::backward() {
  if (!node_) throw GradientError("backward on an undefined tensor");
  if (numel() != 1) {
    throw GradientError("backward requires a scalar loss, got shape " + shape_string(shape()));
  }
  if (!node_->requires_grad) throw GradientError("loss is detached: no recorded op requires gradients");
  if (node_->is_leaf()) throw GradientError("loss is detached: it is a leaf with no recorded ops");
  if (node_->backward_consumed) {
    throw GradientError("backward already ran on this graph; rebuild it with a new forward pass");
  }

  // Iterative post-order DFS gives a topological order of the recorded graph.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Intermediate gradients from an earlier sweep over shared sub-graphs must
  // not leak into this one.
  for (Node* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
  }
  node_->grad.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
  node_->backward_consumed = true;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  Tensor out(node_->shape, node_->value, false);
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_string(node_->shape) + " to " + shape_string(shape));
  }
  auto out = std::make_shared<Node>();
  out->shape = std::move(shape);
  out->value = node_->value;
  if (grad_enabled() && node_->requires_grad) {
    out->requires_grad = true;
    out->parents = {node_};
    out->backward_fn = [](Node& self) {
      auto g = grad_target(*self.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    };
  }
  return Tensor(std::move(out));
}

template class Tensor<float>;
template class Tensor<double>;
template std::span<float> grad_target(TensorNode<float>&);
template std::span<double> grad_target(TensorNode<double>&);

}  // namespace vipa
