#include "vipa/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace vipa {

template <typename T>
Tensor<T> finite_difference_gradient(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T step) {
  NoGradGuard no_grad;
  std::vector<T> base(x.values().begin(), x.values().end());
  std::vector<T> grad(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto plus = base;
    auto minus = base;
    plus[i] += step;
    minus[i] -= step;
    const T fp = f(Tensor<T>(x.shape(), std::move(plus)));
    const T fm = f(Tensor<T>(x.shape(), std::move(minus)));
    grad[i] = (fp - fm) / (T(2) * step);
  }
  return Tensor<T>(x.shape(), std::move(grad));
}

template <typename T>
std::vector<T> finite_difference_gradient(const std::function<T()>& f, Tensor<T>& param, T step) {
  NoGradGuard no_grad;
  auto values = param.mutable_values();
  std::vector<T> grad(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T orig = values[i];
    values[i] = orig + step;
    const T fp = f();
    values[i] = orig - step;
    const T fm = f();
    values[i] = orig;
    grad[i] = (fp - fm) / (T(2) * step);
  }
  return grad;
}

template <typename T>
GradientComparison compare_gradients(std::span<const T> analytic, std::span<const T> numeric, double floor) {
  if (analytic.size() != numeric.size()) throw DimensionError("compare_gradients: size mismatch");
  double diff = 0, na = 0, nn = 0, max_abs = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    diff += (a - n) * (a - n);
    na += a * a;
    nn += n * n;
    max_abs = std::max(max_abs, std::abs(a - n));
  }
  GradientComparison out;
  out.relative_error = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
  out.max_abs_error = max_abs;
  return out;
}

template Tensor<float> finite_difference_gradient(const std::function<float(const Tensor<float>&)>&,
                                                  const Tensor<float>&, float);
template Tensor<double> finite_difference_gradient(const std::function<double(const Tensor<double>&)>&,
                                                   const Tensor<double>&, double);
template std::vector<float> finite_difference_gradient(const std::function<float()>&, Tensor<float>&, float);
template std::vector<double> finite_difference_gradient(const std::function<double()>&, Tensor<double>&, double);
template GradientComparison compare_gradients(std::span<const float>, std::span<const float>, double);
template GradientComparison compare_gradients(std::span<const double>, std::span<const double>, double);

}  // namespace vipa
