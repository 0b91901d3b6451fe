#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vipa/numerics/ops.hpp"
#include "vipa/numerics/random.hpp"
#include "vipa/numerics/tensor.hpp"

namespace vipa {

/// A binary attention mask whose row selects nothing.
class DegenerateMaskError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Ordered registry of named trainable tensors. Each tensor may be registered once.
template <typename T>
class ParameterList {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
  };

  void add(const std::string& name, const Tensor<T>& tensor);
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  const Tensor<T>* find(const std::string& name) const;
  void zero_grad();

 private:
  std::vector<Entry> entries_;
};

struct AttentionConfig {
  std::size_t model_dim = 64;
  std::size_t num_heads = 4;

  std::size_t head_dim() const { return model_dim / num_heads; }
  void validate() const;
};

enum class Activation { gelu, relu };

/// y = x W^T + b with W ~ U(-1/sqrt(in), 1/sqrt(in)) and b = 0.
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in_dim, std::size_t out_dim, Rng& rng, bool with_bias = true);

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::linear(x, weight, bias); }
  void collect(ParameterList<T>& params, const std::string& prefix) const;
  std::size_t in_dim() const { return weight.shape()[1]; }
  std::size_t out_dim() const { return weight.shape()[0]; }

  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::layer_norm(x, gamma, beta); }
  void collect(ParameterList<T>& params, const std::string& prefix) const;

  Tensor<T> gamma;
  Tensor<T> beta;
};

/// Linear -> activation -> Linear.
template <typename T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::size_t dim, std::size_t hidden, Rng& rng, Activation act = Activation::gelu);

  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(ParameterList<T>& params, const std::string& prefix) const;

  Linear<T> fc1;
  Linear<T> fc2;
  Activation activation = Activation::gelu;
};

/// Binary [nq x nk] attention mask, row-major; empty means "attend everywhere".
using AttentionMask = std::vector<std::uint8_t>;

/// Key mask broadcast to every query row.
AttentionMask broadcast_key_mask(const std::vector<std::uint8_t>& key_valid, std::size_t nq);

/// Multi-head attention with separate query and key/value widths. Output has
/// the query width so it can be added back residually.
template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t query_dim, std::size_t kv_dim, const AttentionConfig& cfg, Rng& rng);

  /// Masked positions get exactly zero weight. Throws DegenerateMaskError when
  /// a mask row has no ones.
  Tensor<T> operator()(const Tensor<T>& q, const Tensor<T>& kv, const AttentionMask& mask = {},
                       ops::AttentionProbs<T>* probs = nullptr) const;
  void collect(ParameterList<T>& params, const std::string& prefix) const;

  AttentionConfig config;
  Linear<T> wq, wk, wv, wo;
};

struct BlockOptions {
  AttentionConfig attention;
  double mlp_ratio = 4.0;
  bool pre_norm = true;
  Activation activation = Activation::gelu;
};

/// x + MHA(norm(x), norm(kv)) followed by x + MLP(norm(x)). Rows whose
/// `row_keep` flag is zero pass through unchanged.
template <typename T>
class AttentionBlock {
 public:
  AttentionBlock() = default;
  AttentionBlock(std::size_t query_dim, std::size_t kv_dim, const BlockOptions& opts, Rng& rng);

  /// Attention sub-block only: x + MHA(...).
  Tensor<T> attend(const Tensor<T>& x, const Tensor<T>& kv, const AttentionMask& mask,
                   const std::vector<std::uint8_t>& row_keep = {}, ops::AttentionProbs<T>* probs = nullptr) const;
  /// MLP sub-block only: x + MLP(norm(x)).
  Tensor<T> feed_forward(const Tensor<T>& x, const std::vector<std::uint8_t>& row_keep = {}) const;
  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& kv, const AttentionMask& mask = {},
                       const std::vector<std::uint8_t>& row_keep = {},
                       ops::AttentionProbs<T>* probs = nullptr) const {
    return feed_forward(attend(x, kv, mask, row_keep, probs), row_keep);
  }
  void collect(ParameterList<T>& params, const std::string& prefix) const;

  bool pre_norm = true;
  LayerNorm<T> norm_q, norm_kv, norm_mlp;
  MultiHeadAttention<T> attn;
  Mlp<T> mlp;
};

/// Overwrites every weight and bias with zeros (used by wiring tests).
template <typename T>
void zero_fill(Linear<T>& layer);
/// Sets a square layer to the identity map with zero bias.
template <typename T>
void identity_fill(Linear<T>& layer);

extern template class ParameterList<float>;
extern template class ParameterList<double>;
extern template class Linear<float>;
extern template class Linear<double>;
extern template class LayerNorm<float>;
extern template class LayerNorm<double>;
extern template class Mlp<float>;
extern template class Mlp<double>;
extern template class MultiHeadAttention<float>;
extern template class MultiHeadAttention<double>;
extern template class AttentionBlock<float>;
extern template class AttentionBlock<double>;

}  // namespace vipa
