#pragma once

#include <cstddef>
#include <vector>

#include "vipa/numerics/layers.hpp"

namespace vipa {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  /// Global gradient-norm clip; <= 0 disables.
  double clip_norm = 1.0;
};

/// base * (1 - step / total)^power, clamped at zero past the horizon.
double polynomial_decay(double base_lr, std::size_t step, std::size_t total_steps, double power = 0.9);

/// Decoupled-weight-decay Adam. Weight decay applies to matrices only.
template <typename T>
class AdamW {
 public:
  AdamW(const ParameterList<T>& params, AdamWConfig cfg = {});

  /// Applies one update using the gradients currently held by the parameters.
  /// `grads`, when given, overrides them (one buffer per parameter, same order).
  void step(double lr, const std::vector<std::vector<T>>* grads = nullptr);

  std::size_t step_count() const { return steps_; }
  void set_step_count(std::size_t n) { steps_ = n; }
  /// Norm of the last gradient before clipping.
  double last_grad_norm() const { return last_norm_; }

  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }

 private:
  ParameterList<T> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  std::size_t steps_ = 0;
  double last_norm_ = 0;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace vipa
