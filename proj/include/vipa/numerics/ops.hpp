#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "vipa/numerics/tensor.hpp"

// Differentiable operations. Matrices are rank-2 row-major tensors; ops that
// talk about "rows" treat any tensor as [rows() x cols()].

namespace vipa::ops {

/// Additive bias placed on masked attention scores; exp() of it underflows to
/// exactly zero at both float and double precision.
inline constexpr double kMaskedScore = -1e30;

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
/// x[r x c] + bias[c] broadcast over rows.
template <typename T> Tensor<T> add_row_broadcast(const Tensor<T>& x, const Tensor<T>& bias);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T offset);
/// a * s where s is a scalar tensor.
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& a, const Tensor<T>& s);
/// a / s where s is a scalar tensor.
template <typename T> Tensor<T> div_scalar(const Tensor<T>& a, const Tensor<T>& s);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// a[m x k] * b[n x k]^T.
template <typename T> Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
/// x[n x in] * weight[out x in]^T + bias[out]; bias may be undefined.
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// Max-subtracted softmax along `axis` of a rank-1 or rank-2 tensor.
template <typename T> Tensor<T> softmax(const Tensor<T>& x, int axis = -1);

template <typename T> Tensor<T> exp(const Tensor<T>& x);
template <typename T> Tensor<T> log(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
/// log(1 + e^x), overflow-safe.
template <typename T> Tensor<T> softplus(const Tensor<T>& x);
template <typename T> Tensor<T> relu(const Tensor<T>& x);
/// tanh approximation of GELU.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);

/// Normalises each row to zero mean / unit variance, then applies gamma, beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));

/// Scales each row to unit L2 norm. All-zero rows map to zero with zero gradient.
template <typename T> Tensor<T> normalize_rows(const Tensor<T>& x);

template <typename T> Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);
template <typename T> Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
template <typename T> Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end);
template <typename T> Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows);
/// out.flat[i] = x.flat[index[i]]; gradients scatter-add back.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, Shape out_shape, std::span<const std::size_t> index);
/// Zeroes rows whose flag is false (gradient is zeroed with them).
template <typename T> Tensor<T> mask_rows(const Tensor<T>& x, const std::vector<std::uint8_t>& keep);

/// Forward value is exactly `hard`; the backward pass routes the upstream
/// gradient into `soft` on the entries where `hard` is non-zero.
template <typename T> Tensor<T> straight_through(const Tensor<T>& hard, const Tensor<T>& soft);

/// Bilinear resize (half-pixel centres, edge clamped) of an [h*w x c] token grid.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t h, std::size_t w, std::size_t out_h, std::size_t out_w);

template <typename T>
struct AttentionProbs {
  std::size_t heads = 0, nq = 0, nk = 0;
  std::vector<T> values;  // [heads x nq x nk]

  T at(std::size_t h, std::size_t i, std::size_t j) const { return values[(h * nq + i) * nk + j]; }
  /// Head-averaged [nq x nk] map.
  std::vector<T> head_mean() const;
};

/// Multi-head scaled dot-product attention on already-projected q/k/v.
/// `mask_bias` is an additive [nq x nk] score term (0 or kMaskedScore) or empty.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    const std::vector<T>& mask_bias, AttentionProbs<T>* probs_out = nullptr);

}  // namespace vipa::ops
