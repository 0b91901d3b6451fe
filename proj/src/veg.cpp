#include "vipa/veg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vipa/log.hpp"

namespace vipa {

std::size_t retrieval_count(double ratio, std::size_t n) {
  if (!(ratio > 0.0) || ratio > 1.0) {
    throw ParameterError("retrieval ratio must lie in (0, 1], got " + std::to_string(ratio));
  }
  // The epsilon keeps products such as 0.29 * 100 from flooring to 28.
  const auto k = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
  return std::clamp<std::size_t>(k, 1, std::max<std::size_t>(n, 1));
}

template <typename T>
std::vector<std::size_t> top_k_indices(std::span<const T> row, std::size_t k) {
  std::vector<std::size_t> order(row.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
  order.resize(std::min(k, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b) {
  return ops::matmul_nt(ops::normalize_rows(a), ops::normalize_rows(b));
}

template <typename T>
Tensor<T> RelevanceMap<T>::global_row() const {
  const std::size_t zero = 0;
  return ops::gather_rows(scores, std::span<const std::size_t>(&zero, 1));
}

template <typename T>
RetrievalResult<T> retrieve_informative_tokens(const Tensor<T>& scores, const std::vector<std::uint8_t>& cue_valid,
                                               double ratio, const Tensor<T>& tau, RetrievalMode mode, Rng* rng,
                                               const RetrievalOverrides<T>* overrides) {
  const std::size_t rows = scores.rows(), n = scores.cols();
  if (cue_valid.size() != rows) throw DimensionError("retrieval: cue flags vs relevance rows");
  RetrievalResult<T> out;
  out.keep_count = retrieval_count(ratio, n);
  out.ratio = ratio;
  out.tau = static_cast<double>(tau.item());
  if (!(out.tau > 0.0)) throw ParameterError("retrieval temperature must be positive");

  std::span<const T> ranking;
  if (mode == RetrievalMode::train) {
    if (overrides && overrides->gumbel) {
      out.gumbel = *overrides->gumbel;
    } else {
      if (!rng) throw std::invalid_argument("train-mode retrieval needs a Gumbel noise source");
      out.gumbel = sample_gumbel<T>({rows, n}, *rng);
    }
    out.perturbed = ops::softmax(ops::div_scalar(ops::add(scores, out.gumbel), tau), -1);
    ranking = out.perturbed.values();
  } else {
    out.perturbed = ops::softmax(ops::div_scalar(scores, tau), -1);
    ranking = scores.values();
  }

  out.hard_mask.assign(rows * n, 0);
  out.indices.resize(rows);
  for (std::size_t j = 0; j < rows; ++j) {
    if (!cue_valid[j]) continue;
    if (overrides && overrides->frozen_mask) {
      const auto& fm = *overrides->frozen_mask;
      if (fm.size() != rows * n) throw DimensionError("frozen mask shape");
      for (std::size_t i = 0; i < n; ++i)
        if (fm[j * n + i]) out.indices[j].push_back(i);
    } else {
      out.indices[j] = top_k_indices(ranking.subspan(j * n, n), out.keep_count);
    }
    for (auto i : out.indices[j]) out.hard_mask[j * n + i] = 1;
  }

  std::vector<T> hard(out.hard_mask.begin(), out.hard_mask.end());
  Tensor<T> hard_t({rows, n}, std::move(hard));
  if (mode == RetrievalMode::train) {
    if (overrides && overrides->soft_forward) {
      if (!overrides->anchor) throw std::invalid_argument("soft-forward retrieval needs an anchor");
      out.mask = ops::mul(hard_t, ops::add_scalar(ops::sub(out.perturbed, *overrides->anchor), T(1)));
    } else {
      out.mask = ops::straight_through(hard_t, out.perturbed);
    }
  } else {
    out.mask = hard_t;
  }
  return out;
}

std::size_t ContrastiveTargets::positives() const {
  return static_cast<std::size_t>(std::count(positive.begin(), positive.end(), std::uint8_t{1}));
}

ContrastiveTargets contrastive_targets_from_mask(std::span<const std::uint8_t> mask, std::size_t height,
                                                 std::size_t width, Grid grid) {
  if (mask.size() != height * width) throw DimensionError("contrastive targets: mask size");
  if (grid.h == 0 || grid.w == 0 || height % grid.h || width % grid.w) {
    throw DimensionError("contrastive targets: grid does not tile the mask");
  }
  const std::size_t ch = height / grid.h, cw = width / grid.w;
  std::vector<std::size_t> counts(grid.cells(), 0);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      if (mask[y * width + x]) ++counts[(y / ch) * grid.w + x / cw];
  const std::size_t best = *std::max_element(counts.begin(), counts.end());
  ContrastiveTargets t;
  t.positive.resize(counts.size(), 0);
  for (std::size_t i = 0; i < counts.size(); ++i) t.positive[i] = (counts[i] > 0 && 2 * counts[i] >= best) ? 1 : 0;
  return t;
}

template <typename T>
Tensor<T> pixel_contrastive_loss(const Tensor<T>& scores, const ContrastiveTargets& targets) {
  if (scores.numel() != targets.size()) {
    throw DimensionError("contrastive loss: " + std::to_string(scores.numel()) + " scores vs " +
                         std::to_string(targets.size()) + " targets");
  }
  if (targets.positives() == 0) warn("contrastive loss: no positive pixels; using negatives only");
  std::vector<T> sign(targets.size());
  for (std::size_t i = 0; i < sign.size(); ++i) sign[i] = targets.positive[i] ? T(-1) : T(1);
  auto flat = scores.reshape({scores.numel()});
  const std::size_t n = sign.size();
  return ops::mean(ops::softplus(ops::mul(flat, Tensor<T>({n}, std::move(sign)))));
}

template <typename T>
Tensor<T> masked_token_sum(const Tensor<T>& vision, const Tensor<T>& mask) {
  return ops::matmul(mask, vision);
}

AttentionMask refinement_mask(const std::vector<std::uint8_t>& hard_mask, const std::vector<std::uint8_t>& cue_valid,
                              std::size_t n) {
  AttentionMask m(hard_mask.begin(), hard_mask.end());
  for (std::size_t j = 0; j < cue_valid.size(); ++j)
    if (!cue_valid[j]) std::fill_n(m.begin() + static_cast<std::ptrdiff_t>(j * n), n, std::uint8_t{1});
  return m;
}

template <typename T>
Tensor<T> refine_visual_context(const AttentionBlock<T>& block, const Tensor<T>& aggregated, const Tensor<T>& vision,
                                const std::vector<std::uint8_t>& hard_mask, const std::vector<std::uint8_t>& cue_valid,
                                Tensor<T>* attended, ops::AttentionProbs<T>* probs) {
  const auto mask = refinement_mask(hard_mask, cue_valid, vision.rows());
  auto f_hat = block.attend(aggregated, vision, mask, cue_valid, probs);
  if (attended) *attended = f_hat;
  return block.feed_forward(f_hat, cue_valid);
}

template <typename T>
Tensor<T> share_visual_attributes(const AttentionBlock<T>& block, const Tensor<T>& refined,
                                  const std::vector<std::uint8_t>& valid, Tensor<T>* shared) {
  auto e_hat = block.attend(refined, refined, broadcast_key_mask(valid, refined.rows()), valid);
  if (shared) *shared = e_hat;
  return block.feed_forward(e_hat, valid);
}

template <typename T>
VisualExpressionGenerator<T>::VisualExpressionGenerator(const ModelConfig& cfg, Rng& rng) {
  const std::size_t c = cfg.stage_channels(ModelConfig::kStages - 1), d = cfg.model_dim;
  vision_proj = Linear<T>(c, cfg.joint_dim, rng);
  linguistic_proj = Linear<T>(d, cfg.joint_dim, rng);
  log_tau = Tensor<T>::scalar(static_cast<T>(std::log(cfg.tau_init)), true);
  log_contrast_scale = Tensor<T>::scalar(static_cast<T>(std::log(cfg.contrast_scale_init)), true);
  aggregate_proj = Linear<T>(c, d, rng);
  refine_block = AttentionBlock<T>(d, c, cfg.block_options(d), rng);
  share_block = AttentionBlock<T>(d, d, cfg.block_options(d), rng);
}

template <typename T>
RelevanceMap<T> VisualExpressionGenerator<T>::compute_relevance(const Tensor<T>& vision,
                                                                const Tensor<T>& linguistic) const {
  RelevanceMap<T> rel;
  rel.vision = vision_proj(vision);
  rel.linguistic = linguistic_proj(linguistic);
  rel.scores = cosine_similarity(rel.linguistic, rel.vision);
  return rel;
}

template <typename T>
Tensor<T> VisualExpressionGenerator<T>::aggregate(const Tensor<T>& vision, const Tensor<T>& mask) const {
  return aggregate_proj(masked_token_sum(vision, mask));
}

template <typename T>
VegOutput<T> VisualExpressionGenerator<T>::generate(const Tensor<T>& vision,
                                                    const AdvancedLinguisticTokens<T>& linguistic,
                                                    const std::vector<std::uint8_t>& cue_valid,
                                                    const ContrastiveTargets* targets,
                                                    const VegOptions<T>& opts) const {
  VegOutput<T> out;
  out.relevance = compute_relevance(vision, linguistic.tokens);
  if (targets) {
    out.contrastive_logits = ops::mul_scalar(out.relevance.global_row(), contrast_scale());
    out.contrastive_loss = pixel_contrastive_loss(out.contrastive_logits, *targets);
  }

  const auto tau = temperature();
  const std::size_t rows = out.relevance.scores.rows(), n = vision.rows();
  if (opts.use_retrieval) {
    out.retrieval = retrieve_informative_tokens(out.relevance.scores, cue_valid, opts.ratio, tau, opts.mode, opts.rng,
                                                opts.overrides);
  } else {
    auto& r = out.retrieval;
    r.keep_count = n;
    r.ratio = 1.0;
    r.tau = static_cast<double>(tau.item());
    r.perturbed = ops::softmax(ops::div_scalar(out.relevance.scores, tau), -1);
    r.hard_mask.assign(rows * n, 0);
    r.indices.resize(rows);
    for (std::size_t j = 0; j < rows; ++j) {
      if (!cue_valid[j]) continue;
      for (std::size_t i = 0; i < n; ++i) {
        r.hard_mask[j * n + i] = 1;
        r.indices[j].push_back(i);
      }
    }
    r.mask = Tensor<T>({rows, n}, std::vector<T>(r.hard_mask.begin(), r.hard_mask.end()));
  }

  auto& ve = out.expression;
  ve.valid = cue_valid;
  ve.aggregated = aggregate(vision, out.retrieval.mask);
  if (opts.use_refinement) {
    ve.refined = refine_visual_context(refine_block, ve.aggregated, vision, out.retrieval.hard_mask, cue_valid,
                                       &ve.attended, &ve.refine_attention);
    ve.tokens = share_visual_attributes(share_block, ve.refined, cue_valid, &ve.shared);
  } else {
    ve.attended = ve.refined = ve.shared = ve.tokens = ve.aggregated;
  }
  return out;
}

template <typename T>
void VisualExpressionGenerator<T>::collect(ParameterList<T>& params, const std::string& prefix) const {
  vision_proj.collect(params, prefix + ".phi_v");
  linguistic_proj.collect(params, prefix + ".phi_l");
  params.add(prefix + ".log_tau", log_tau);
  params.add(prefix + ".log_contrast_scale", log_contrast_scale);
  aggregate_proj.collect(params, prefix + ".aggregate");
  refine_block.collect(params, prefix + ".refine");
  share_block.collect(params, prefix + ".share");
}

#define VIPA_INSTANTIATE_VEG(T)                                                                                  \
  template std::vector<std::size_t> top_k_indices<T>(std::span<const T>, std::size_t);                         \
  template Tensor<T> cosine_similarity(const Tensor<T>&, const Tensor<T>&);                                    \
  template struct RelevanceMap<T>;                                                                             \
  template RetrievalResult<T> retrieve_informative_tokens(const Tensor<T>&, const std::vector<std::uint8_t>&,  \
                                                          double, const Tensor<T>&, RetrievalMode, Rng*,       \
                                                          const RetrievalOverrides<T>*);                       \
  template Tensor<T> pixel_contrastive_loss(const Tensor<T>&, const ContrastiveTargets&);                      \
  template Tensor<T> masked_token_sum(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> refine_visual_context(const AttentionBlock<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                           const std::vector<std::uint8_t>&, const std::vector<std::uint8_t>&, \
                                           Tensor<T>*, ops::AttentionProbs<T>*);                               \
  template Tensor<T> share_visual_attributes(const AttentionBlock<T>&, const Tensor<T>&,                       \
                                             const std::vector<std::uint8_t>&, Tensor<T>*);                    \
  template class VisualExpressionGenerator<T>;

VIPA_INSTANTIATE_VEG(float)
VIPA_INSTANTIATE_VEG(double)

#undef VIPA_INSTANTIATE_VEG

}  // namespace vipa
