#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "vipa/model_config.hpp"
#include "vipa/numerics/layers.hpp"

// Toy vision and language encoders plus the cross-modal fusion blocks that
// turn linguistic tokens into their vision-aware ("advanced") form.

namespace vipa {

/// RGB image, row-major [height x width x 3], values in [0, 1].
struct SceneImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }
};

struct Grid {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t cells() const { return h * w; }
  friend bool operator==(const Grid&, const Grid&) = default;
};

/// Per-stage token maps F_1..F_4, each [h*w x C_i]; the last one is F_v.
template <typename T>
struct VisionFeatures {
  std::vector<Tensor<T>> stages;
  std::vector<Grid> grids;

  const Tensor<T>& tokens() const { return stages.back(); }
  std::size_t token_count() const { return grids.back().cells(); }
};

/// E_L: [L x D] with row 0 the sentence-level [CLS] token.
template <typename T>
struct LinguisticTokens {
  Tensor<T> tokens;
  std::vector<std::size_t> word_ids;
  std::vector<std::uint8_t> valid;  // 1 for [CLS] and real words, 0 for padding

  std::size_t length() const { return valid.size(); }
};

/// Vision-aware linguistic tokens; same shape and validity as the input.
template <typename T>
struct AdvancedLinguisticTokens {
  Tensor<T> tokens;
  std::vector<std::uint8_t> valid;
};

/// Flattens an image into a [H*W x 3] tensor.
template <typename T>
Tensor<T> image_tensor(const SceneImage& img);

/// Index map for non-overlapping patch x patch blocks of a [h*w x c] grid:
/// output row = block, columns = (dy, dx, channel).
std::vector<std::size_t> patch_gather_index(Grid grid, std::size_t channels, std::size_t patch);
/// Index map for nearest-neighbour 2x upsampling of a [h*w x c] grid.
std::vector<std::size_t> upsample2x_index(Grid grid, std::size_t channels);

template <typename T>
class VisionEncoder {
 public:
  VisionEncoder() = default;
  VisionEncoder(const ModelConfig& cfg, Rng& rng);

  /// Patchify + linear embed + learned row/column position bias.
  Tensor<T> embed(const SceneImage& img, Grid& grid) const;
  Tensor<T> stage_block(std::size_t stage, const Tensor<T>& x) const { return blocks_[stage](x, x); }
  /// 2x2 patch merging into the next stage's width.
  Tensor<T> merge(std::size_t stage, const Tensor<T>& x, Grid& grid) const;
  void collect(ParameterList<T>& params, const std::string& prefix) const;

  std::size_t base_channels() const { return base_channels_; }

  Linear<T> patch_embed;
  Tensor<T> pos_row, pos_col;
  std::vector<AttentionBlock<T>> blocks_;
  std::vector<LayerNorm<T>> merge_norms_;
  std::vector<Linear<T>> merge_proj_;

 private:
  std::size_t base_channels_ = 0;
  bool pre_norm_ = true;
};

/// Learned embeddings + sinusoidal positions + masked self-attention blocks.
template <typename T>
class LanguageEncoder {
 public:
  LanguageEncoder() = default;
  LanguageEncoder(const ModelConfig& cfg, Rng& rng);

  /// `pad_to` > words+1 appends padding rows that are masked everywhere.
  /// Throws VocabularyError for ids outside the vocabulary.
  LinguisticTokens<T> encode(std::span<const std::size_t> word_ids, std::size_t pad_to = 0) const;
  void collect(ParameterList<T>& params, const std::string& prefix) const;

  Tensor<T> embedding;  // [vocab x D]
  Tensor<T> cls;        // [1 x D]
  std::vector<AttentionBlock<T>> blocks;

 private:
  std::size_t dim_ = 0;
  std::size_t max_tokens_ = 0;
};

/// Fixed sinusoidal position code for `length` positions of width `dim`.
template <typename T>
Tensor<T> sinusoidal_positions(std::size_t length, std::size_t dim);

/// Bidirectional cross-attention between linguistic tokens and one vision stage.
template <typename T>
class FusionBlock {
 public:
  FusionBlock() = default;
  FusionBlock(std::size_t lang_dim, std::size_t vision_dim, const ModelConfig& cfg, Rng& rng);

  /// Language queries over vision keys; padding rows pass through unchanged.
  Tensor<T> advance(const Tensor<T>& lang, const std::vector<std::uint8_t>& valid, const Tensor<T>& vision) const;
  /// Vision queries over the valid linguistic tokens.
  Tensor<T> inform(const Tensor<T>& vision, const Tensor<T>& lang, const std::vector<std::uint8_t>& valid) const;
  void collect(ParameterList<T>& params, const std::string& prefix) const;

  AttentionBlock<T> language_side;
  AttentionBlock<T> vision_side;
};

/// Runs language-side fusion blocks in order with F_v as key-value.
template <typename T>
AdvancedLinguisticTokens<T> advance_linguistic_tokens(std::span<const FusionBlock<T>> blocks,
                                                      const LinguisticTokens<T>& lang, const Tensor<T>& vision);

template <typename T>
struct EncodedInputs {
  VisionFeatures<T> vision;
  LinguisticTokens<T> language;           // E_L
  AdvancedLinguisticTokens<T> advanced;   // Ê_L
};

/// Vision + language encoders wired according to a fusion mode:
/// none  - no cross-modal exchange, Ê_L = E_L;
/// late  - one bidirectional block after stage 4;
/// early - bidirectional blocks after stages 3 and 4.
template <typename T>
class Encoders {
 public:
  Encoders() = default;
  Encoders(const ModelConfig& cfg, Rng& rng);

  EncodedInputs<T> encode(const SceneImage& img, std::span<const std::size_t> word_ids, std::size_t pad_to = 0) const;
  void collect(ParameterList<T>& params, const std::string& prefix) const;

  /// Stage indices (0-based) after which a fusion block runs.
  const std::vector<std::size_t>& fusion_stages() const { return fusion_stages_; }

  FusionMode mode = FusionMode::early;
  VisionEncoder<T> vision;
  LanguageEncoder<T> language;
  std::vector<FusionBlock<T>> fusion;

 private:
  std::vector<std::size_t> fusion_stages_;
  std::size_t image_size_ = 0;
};

extern template class VisionEncoder<float>;
extern template class VisionEncoder<double>;
extern template class LanguageEncoder<float>;
extern template class LanguageEncoder<double>;
extern template class FusionBlock<float>;
extern template class FusionBlock<double>;
extern template class Encoders<float>;
extern template class Encoders<double>;

}  // namespace vipa
