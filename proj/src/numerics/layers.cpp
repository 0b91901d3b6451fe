#include "vipa/numerics/layers.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace vipa {

template <typename T>
void ParameterList<T>::add(const std::string& name, const Tensor<T>& tensor) {
  for (const auto& e : entries_) {
    if (e.name == name) throw std::logic_error("parameter registered twice: " + name);
    if (e.tensor.node() == tensor.node()) throw std::logic_error("tensor registered under two names: " + name);
  }
  if (!tensor.requires_grad()) throw std::logic_error("parameter does not require gradients: " + name);
  entries_.push_back({name, tensor});
}

template <typename T>
std::size_t ParameterList<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

template <typename T>
const Tensor<T>* ParameterList<T>::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e.tensor;
  return nullptr;
}

template <typename T>
void ParameterList<T>::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

void AttentionConfig::validate() const {
  if (model_dim == 0 || num_heads == 0) throw std::invalid_argument("attention dims must be positive");
  if (model_dim % num_heads != 0) {
    throw std::invalid_argument("model dim " + std::to_string(model_dim) + " not divisible by " +
                                std::to_string(num_heads) + " heads");
  }
}

template <typename T>
Linear<T>::Linear(std::size_t in_dim, std::size_t out_dim, Rng& rng, bool with_bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
  std::vector<T> w(in_dim * out_dim);
  for (auto& x : w) x = static_cast<T>(uniform(rng, -bound, bound));
  weight = Tensor<T>({out_dim, in_dim}, std::move(w), true);
  if (with_bias) bias = Tensor<T>::zeros({out_dim}, true);
}

template <typename T>
void Linear<T>::collect(ParameterList<T>& params, const std::string& prefix) const {
  params.add(prefix + ".weight", weight);
  if (bias.defined()) params.add(prefix + ".bias", bias);
}

template <typename T>
LayerNorm<T>::LayerNorm(std::size_t dim)
    : gamma(Tensor<T>::full({dim}, T(1), true)), beta(Tensor<T>::zeros({dim}, true)) {}

template <typename T>
void LayerNorm<T>::collect(ParameterList<T>& params, const std::string& prefix) const {
  params.add(prefix + ".gamma", gamma);
  params.add(prefix + ".beta", beta);
}

template <typename T>
Mlp<T>::Mlp(std::size_t dim, std::size_t hidden, Rng& rng, Activation act)
    : fc1(dim, hidden, rng), fc2(hidden, dim, rng), activation(act) {}

template <typename T>
Tensor<T> Mlp<T>::operator()(const Tensor<T>& x) const {
  auto h = fc1(x);
  h = activation == Activation::gelu ? ops::gelu(h) : ops::relu(h);
  return fc2(h);
}

template <typename T>
void Mlp<T>::collect(ParameterList<T>& params, const std::string& prefix) const {
  fc1.collect(params, prefix + ".fc1");
  fc2.collect(params, prefix + ".fc2");
}

AttentionMask broadcast_key_mask(const std::vector<std::uint8_t>& key_valid, std::size_t nq) {
  AttentionMask m;
  m.reserve(nq * key_valid.size());
  for (std::size_t i = 0; i < nq; ++i) m.insert(m.end(), key_valid.begin(), key_valid.end());
  return m;
}

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(std::size_t query_dim, std::size_t kv_dim, const AttentionConfig& cfg,
                                          Rng& rng)
    : config(cfg),
      wq(query_dim, cfg.model_dim, rng),
      wk(kv_dim, cfg.model_dim, rng),
      wv(kv_dim, cfg.model_dim, rng),
      wo(cfg.model_dim, query_dim, rng) {
  cfg.validate();
}

template <typename T>
Tensor<T> MultiHeadAttention<T>::operator()(const Tensor<T>& q, const Tensor<T>& kv, const AttentionMask& mask,
                                            ops::AttentionProbs<T>* probs) const {
  const std::size_t nq = q.rows(), nk = kv.rows();
  std::vector<T> bias;
  if (!mask.empty()) {
    if (mask.size() != nq * nk) {
      throw DimensionError("attention mask has " + std::to_string(mask.size()) + " entries, expected " +
                           std::to_string(nq) + "x" + std::to_string(nk));
    }
    bias.assign(nq * nk, T(0));
    for (std::size_t i = 0; i < nq; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < nk; ++j) {
        if (mask[i * nk + j]) {
          any = true;
        } else {
          bias[i * nk + j] = static_cast<T>(ops::kMaskedScore);
        }
      }
      if (!any) throw DegenerateMaskError("attention mask row " + std::to_string(i) + " selects no key");
    }
  }
  auto out = ops::attention(wq(q), wk(kv), wv(kv), config.num_heads, bias, probs);
  return wo(out);
}

template <typename T>
void MultiHeadAttention<T>::collect(ParameterList<T>& params, const std::string& prefix) const {
  wq.collect(params, prefix + ".q");
  wk.collect(params, prefix + ".k");
  wv.collect(params, prefix + ".v");
  wo.collect(params, prefix + ".o");
}

template <typename T>
AttentionBlock<T>::AttentionBlock(std::size_t query_dim, std::size_t kv_dim, const BlockOptions& opts, Rng& rng)
    : pre_norm(opts.pre_norm),
      norm_q(query_dim),
      norm_kv(kv_dim),
      norm_mlp(query_dim),
      attn(query_dim, kv_dim, opts.attention, rng),
      mlp(query_dim, static_cast<std::size_t>(std::lround(opts.mlp_ratio * static_cast<double>(query_dim))), rng,
          opts.activation) {}

template <typename T>
Tensor<T> AttentionBlock<T>::attend(const Tensor<T>& x, const Tensor<T>& kv, const AttentionMask& mask,
                                    const std::vector<std::uint8_t>& row_keep, ops::AttentionProbs<T>* probs) const {
  auto q = pre_norm ? norm_q(x) : x;
  auto k = pre_norm ? norm_kv(kv) : kv;
  auto update = attn(q, k, mask, probs);
  if (!row_keep.empty()) update = ops::mask_rows(update, row_keep);
  return ops::add(x, update);
}

template <typename T>
Tensor<T> AttentionBlock<T>::feed_forward(const Tensor<T>& x, const std::vector<std::uint8_t>& row_keep) const {
  auto update = mlp(pre_norm ? norm_mlp(x) : x);
  if (!row_keep.empty()) update = ops::mask_rows(update, row_keep);
  return ops::add(x, update);
}

template <typename T>
void AttentionBlock<T>::collect(ParameterList<T>& params, const std::string& prefix) const {
  if (pre_norm) {
    norm_q.collect(params, prefix + ".norm_q");
    norm_kv.collect(params, prefix + ".norm_kv");
    norm_mlp.collect(params, prefix + ".norm_mlp");
  }
  attn.collect(params, prefix + ".attn");
  mlp.collect(params, prefix + ".mlp");
}

template <typename T>
void zero_fill(Linear<T>& layer) {
  std::ranges::fill(layer.weight.mutable_values(), T(0));
  if (layer.bias.defined()) std::ranges::fill(layer.bias.mutable_values(), T(0));
}

template <typename T>
void identity_fill(Linear<T>& layer) {
  if (layer.in_dim() != layer.out_dim()) throw DimensionError("identity_fill on a non-square layer");
  zero_fill(layer);
  auto w = layer.weight.mutable_values();
  for (std::size_t i = 0; i < layer.in_dim(); ++i) w[i * layer.in_dim() + i] = T(1);
}

template class ParameterList<float>;
template class ParameterList<double>;
template class Linear<float>;
template class Linear<double>;
template class LayerNorm<float>;
template class LayerNorm<double>;
template class Mlp<float>;
template class Mlp<double>;
template class MultiHeadAttention<float>;
template class MultiHeadAttention<double>;
template class AttentionBlock<float>;
template class AttentionBlock<double>;
template void zero_fill(Linear<float>&);
template void zero_fill(Linear<double>&);
template void identity_fill(Linear<float>&);
template void identity_fill(Linear<double>&);

}  // namespace vipa
