#pragma once

#include <functional>
#include <span>
#include <vector>

#include "vipa/numerics/tensor.hpp"

// Central-difference gradient oracle. It only ever calls forward code, so it
// stays independent of the tape it is used to verify.

namespace vipa {

/// (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate of x.
template <typename T>
Tensor<T> finite_difference_gradient(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T step);

/// Same estimate, perturbing `param` in place and re-evaluating `f`.
/// The parameter is restored exactly before returning.
template <typename T>
std::vector<T> finite_difference_gradient(const std::function<T()>& f, Tensor<T>& param, T step);

struct GradientComparison {
  /// ||analytic - numeric|| / max(||analytic||, ||numeric||, floor)
  double relative_error = 0;
  double max_abs_error = 0;
};

template <typename T>
GradientComparison compare_gradients(std::span<const T> analytic, std::span<const T> numeric, double floor = 1e-8);

}  // namespace vipa
