#include "vipa/numerics/random.hpp"

#include <cmath>

namespace vipa {

template <typename T>
Tensor<T> sample_gumbel(const Shape& shape, Rng& rng) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(gumbel_from_uniform(uniform_open01(rng)));
  return Tensor<T>(shape, std::move(v));
}

template Tensor<float> sample_gumbel<float>(const Shape&, Rng&);
template Tensor<double> sample_gumbel<double>(const Shape&, Rng&);

}  // namespace vipa
