#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "vipa/encoders.hpp"
#include "vipa/model_config.hpp"
#include "vipa/numerics/layers.hpp"

// Visual expression generator: relevance-driven retrieval of informative
// stage-4 visual tokens per linguistic cue, contrastive supervision of the
// global relevance row, and refinement of the retrieved tokens into the
// visual expression used as the decoder's key-value set.

namespace vipa {

class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class RetrievalMode { train, eval };

/// N_p = max(1, floor(ratio * n)). Throws ParameterError unless 0 < ratio <= 1.
std::size_t retrieval_count(double ratio, std::size_t n);

/// Indices of the k largest entries, ties resolved towards the lower index,
/// returned in increasing index order.
template <typename T>
std::vector<std::size_t> top_k_indices(std::span<const T> row, std::size_t k);

/// Pairwise cosine similarity [rows(a) x rows(b)]; zero-norm rows score 0.
template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b);

/// S_c with the projected tokens it was computed from.
template <typename T>
struct RelevanceMap {
  Tensor<T> scores;      // [L x N]
  Tensor<T> vision;      // X, [N x D_j]
  Tensor<T> linguistic;  // Y, [L x D_j]

  /// Global ([CLS]) relevance row s, [1 x N].
  Tensor<T> global_row() const;
};

/// Testing hooks: fixed Gumbel noise, a frozen hard mask, and a smooth
/// forward M = hard * (1 + S' - anchor). At S' == anchor it has the hard
/// value and exactly the straight-through gradient, so finite differences of
/// it verify the straight-through path.
template <typename T>
struct RetrievalOverrides {
  std::optional<Tensor<T>> gumbel;
  std::optional<std::vector<std::uint8_t>> frozen_mask;
  bool soft_forward = false;
  std::optional<Tensor<T>> anchor;  // S' at the point being checked; required by soft_forward
};

template <typename T>
struct RetrievalResult {
  Tensor<T> perturbed;                        // S' [L x N]
  Tensor<T> mask;                             // M as used downstream (hard values)
  std::vector<std::uint8_t> hard_mask;        // [L x N]
  std::vector<std::vector<std::size_t>> indices;  // R, per row, ascending; empty for excluded rows
  Tensor<T> gumbel;                           // noise used (train mode)
  std::size_t keep_count = 0;                 // N_p
  double ratio = 0;
  double tau = 0;

  std::size_t rows() const { return indices.size(); }
  std::size_t columns() const { return rows() ? hard_mask.size() / rows() : 0; }
};

/// Per-row top-N_p selection on Gumbel-perturbed softmax scores (train) or on
/// the raw relevance (eval). Rows with cue_valid == 0 select nothing. In train
/// mode the returned mask carries a straight-through gradient into S'.
template <typename T>
RetrievalResult<T> retrieve_informative_tokens(const Tensor<T>& scores, const std::vector<std::uint8_t>& cue_valid,
                                               double ratio, const Tensor<T>& tau, RetrievalMode mode, Rng* rng,
                                               const RetrievalOverrides<T>* overrides = nullptr);

/// Stage-4 pixel sets for the contrastive loss.
struct ContrastiveTargets {
  std::vector<std::uint8_t> positive;  // one flag per stage-4 token

  std::size_t positives() const;
  std::size_t size() const { return positive.size(); }
};

/// Downsamples a binary [H x W] mask to a grid. A cell is positive when it
/// holds at least half as many target pixels as the fullest cell.
ContrastiveTargets contrastive_targets_from_mask(std::span<const std::uint8_t> mask, std::size_t height,
                                                 std::size_t width, Grid grid);

/// Mean over pixels of softplus(-s) on positives and softplus(s) on
/// negatives, i.e. -log sigma(s) and -log(1 - sigma(s)). An empty positive
/// set emits a warning and the loss covers the negatives only.
template <typename T>
Tensor<T> pixel_contrastive_loss(const Tensor<T>& scores, const ContrastiveTargets& targets);

/// Row j: sum of the vision rows selected by M[j] (M * F_v).
template <typename T>
Tensor<T> masked_token_sum(const Tensor<T>& vision, const Tensor<T>& mask);

template <typename T>
struct VisualExpression {
  Tensor<T> aggregated;  // F_a
  Tensor<T> attended;    // F̂
  Tensor<T> refined;     // F_r
  Tensor<T> shared;      // Ê
  Tensor<T> tokens;      // Ê_V
  std::vector<std::uint8_t> valid;
  ops::AttentionProbs<T> refine_attention;
};

/// Attention mask for the masked cross-attention: rows of M, with excluded
/// (all-zero) rows widened to all ones; their updates are discarded.
AttentionMask refinement_mask(const std::vector<std::uint8_t>& hard_mask, const std::vector<std::uint8_t>& cue_valid,
                              std::size_t n);

/// F̂ = MHCA(F_a, F_v, M) + F_a;  F_r = MLP(F̂) + F̂.
template <typename T>
Tensor<T> refine_visual_context(const AttentionBlock<T>& block, const Tensor<T>& aggregated, const Tensor<T>& vision,
                                const std::vector<std::uint8_t>& hard_mask, const std::vector<std::uint8_t>& cue_valid,
                                Tensor<T>* attended = nullptr, ops::AttentionProbs<T>* probs = nullptr);

/// Ê = MHSA(F_r) + F_r over valid rows;  Ê_V = MLP(Ê) + Ê.
template <typename T>
Tensor<T> share_visual_attributes(const AttentionBlock<T>& block, const Tensor<T>& refined,
                                  const std::vector<std::uint8_t>& valid, Tensor<T>* shared = nullptr);

template <typename T>
struct VegOptions {
  double ratio = 0.30;
  RetrievalMode mode = RetrievalMode::train;
  Rng* rng = nullptr;  // Gumbel source in train mode
  const RetrievalOverrides<T>* overrides = nullptr;
  bool use_retrieval = true;
  bool use_refinement = true;
};

template <typename T>
struct VegOutput {
  RelevanceMap<T> relevance;
  RetrievalResult<T> retrieval;
  VisualExpression<T> expression;
  Tensor<T> contrastive_loss;  // undefined without targets
  Tensor<T> contrastive_logits;  // scaled global row fed to the loss
};

template <typename T>
class VisualExpressionGenerator {
 public:
  VisualExpressionGenerator() = default;
  VisualExpressionGenerator(const ModelConfig& cfg, Rng& rng);

  RelevanceMap<T> compute_relevance(const Tensor<T>& vision, const Tensor<T>& linguistic) const;
  Tensor<T> temperature() const { return ops::exp(log_tau); }
  Tensor<T> contrast_scale() const { return ops::exp(log_contrast_scale); }
  /// F_a = linear(M * F_v).
  Tensor<T> aggregate(const Tensor<T>& vision, const Tensor<T>& mask) const;

  VegOutput<T> generate(const Tensor<T>& vision, const AdvancedLinguisticTokens<T>& linguistic,
                        const std::vector<std::uint8_t>& cue_valid, const ContrastiveTargets* targets,
                        const VegOptions<T>& opts) const;
  void collect(ParameterList<T>& params, const std::string& prefix) const;

  Linear<T> vision_proj;      // φ^V
  Linear<T> linguistic_proj;  // φ^L
  Tensor<T> log_tau;
  Tensor<T> log_contrast_scale;
  Linear<T> aggregate_proj;
  AttentionBlock<T> refine_block;
  AttentionBlock<T> share_block;
};

extern template class VisualExpressionGenerator<float>;
extern template class VisualExpressionGenerator<double>;

}  // namespace vipa
