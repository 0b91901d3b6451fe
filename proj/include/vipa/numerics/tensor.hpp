#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace vipa {

using Shape = std::vector<std::size_t>;

/// Shape or dimension disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A forward op produced NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Misuse of the gradient tape (non-scalar loss, detached graph, double backward).
class GradientError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename T>
struct TensorNode {
  using BackwardFn = std::function<void(TensorNode&)>;

  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool backward_consumed = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  BackwardFn backward_fn;

  bool is_leaf() const { return parents.empty(); }
};

/// Redirects leaf-gradient accumulation for the current thread. Used by the
/// data-parallel trainer so that several tapes can share parameters.
template <typename T>
struct GradSink {
  std::unordered_map<const TensorNode<T>*, std::vector<T>> buffers;
};

template <typename T>
inline thread_local GradSink<T>* t_grad_sink = nullptr;

namespace detail {
inline thread_local bool t_grad_enabled = true;
}  // namespace detail

inline bool grad_enabled() { return detail::t_grad_enabled; }

/// Disables tape recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::t_grad_enabled) { detail::t_grad_enabled = false; }
  ~NoGradGuard() { detail::t_grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class ScopedGradSink {
 public:
  explicit ScopedGradSink(GradSink<T>* sink) : previous_(t_grad_sink<T>) { t_grad_sink<T> = sink; }
  ~ScopedGradSink() { t_grad_sink<T> = previous_; }
  ScopedGradSink(const ScopedGradSink&) = delete;
  ScopedGradSink& operator=(const ScopedGradSink&) = delete;

 private:
  GradSink<T>* previous_;
};

/// Dense row-major tensor handle. Copies share the underlying node; ops
/// always allocate new nodes, so values are immutable once recorded.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T fill, bool requires_grad = false);
  static Tensor scalar(T v, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  /// Product of all leading dimensions (1 for scalars and vectors).
  std::size_t rows() const;
  /// Last dimension (1 for scalars).
  std::size_t cols() const;

  std::span<const T> values() const { return node_->value; }
  /// Direct write access, intended for initialisation and optimizer steps.
  std::span<T> mutable_values() { return node_->value; }
  T item() const;
  T at(std::size_t i) const { return node_->value.at(i); }
  T at(std::size_t r, std::size_t c) const { return node_->value.at(r * cols() + c); }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad();

  /// Reverse-mode sweep from this scalar; accumulates into every leaf that
  /// requires gradients. A graph may be swept once.
  void backward();

  Tensor detach() const;
  Tensor reshape(Shape shape) const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Gradient buffer a backward function should accumulate into for `node`;
/// empty when the node does not participate.
template <typename T>
std::span<T> grad_target(TensorNode<T>& node);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace vipa
