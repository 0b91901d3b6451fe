#include "vipa/numerics/optimizer.hpp"

#include <cmath>

namespace vipa {

double polynomial_decay(double base_lr, std::size_t step, std::size_t total_steps, double power) {
  if (total_steps == 0 || step >= total_steps) return 0.0;
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * std::pow(frac, power);
}

template <typename T>
AdamW<T>::AdamW(const ParameterList<T>& params, AdamWConfig cfg) : params_(params), cfg_(cfg) {
  for (const auto& e : params_.entries()) {
    m_.emplace_back(e.tensor.numel(), T(0));
    v_.emplace_back(e.tensor.numel(), T(0));
  }
}

template <typename T>
void AdamW<T>::step(double lr, const std::vector<std::vector<T>>* grads) {
  const auto& entries = params_.entries();
  if (grads && grads->size() != entries.size()) throw std::invalid_argument("AdamW: gradient buffer count");
  auto grad_of = [&](std::size_t i) -> std::span<const T> {
    if (grads) return (*grads)[i];
    return entries[i].tensor.grad();
  };

  double sq = 0;
  for (std::size_t i = 0; i < entries.size(); ++i)
    for (T g : grad_of(i)) sq += static_cast<double>(g) * static_cast<double>(g);
  last_norm_ = std::sqrt(sq);
  if (!std::isfinite(last_norm_)) throw NumericError("AdamW: non-finite gradient norm");
  const double clip = (cfg_.clip_norm > 0 && last_norm_ > cfg_.clip_norm) ? cfg_.clip_norm / last_norm_ : 1.0;

  ++steps_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto g = grad_of(i);
    if (g.empty()) continue;
    Tensor<T> param = entries[i].tensor;
    auto w = param.mutable_values();
    const bool decay = param.rank() >= 2 && cfg_.weight_decay > 0;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = static_cast<double>(g[j]) * clip;
      m[j] = static_cast<T>(cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj);
      v[j] = static_cast<T>(cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj);
      const double mhat = m[j] / bc1, vhat = v[j] / bc2;
      double update = mhat / (std::sqrt(vhat) + cfg_.eps);
      if (decay) update += cfg_.weight_decay * static_cast<double>(w[j]);
      w[j] = static_cast<T>(static_cast<double>(w[j]) - lr * update);
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace vipa
