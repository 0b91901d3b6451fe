#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "vipa/encoders.hpp"
#include "vipa/model_config.hpp"
#include "vipa/numerics/layers.hpp"
#include "vipa/veg.hpp"

// Segmentation decoder: vision tokens query a key-value token set at each
// stage, with nearest-neighbour upsampling and skip fusion between stages and
// a linear per-pixel head.

namespace vipa {

/// Key-value tokens for the decoder with their row validity.
template <typename T>
struct KeyValueTokens {
  Tensor<T> tokens;  // [L x D]
  std::vector<std::uint8_t> valid;
  KeyValueSource source = KeyValueSource::ve;
};

template <typename T>
KeyValueTokens<T> select_keyvalue_source(KeyValueSource source, const EncodedInputs<T>& encoded,
                                         const VisualExpression<T>& expression);

/// F_o = MHCA(F, kv, valid) + F;  F_d = MLP(F_o) + F_o.
/// Throws DegenerateMaskError when no kv row is valid.
template <typename T>
Tensor<T> decode_stage(const AttentionBlock<T>& block, const Tensor<T>& features, const KeyValueTokens<T>& kv,
                       Tensor<T>* intermediate = nullptr, ops::AttentionProbs<T>* probs = nullptr);

/// Upsamples `decoded` on `grid` 2x, concatenates the encoder skip features
/// (which must sit on the doubled grid) and reduces with `reduce`.
template <typename T>
Tensor<T> upsample_and_fuse(const Linear<T>& reduce, const Tensor<T>& decoded, Grid grid, const Tensor<T>& skip,
                            Grid skip_grid);

template <typename T>
struct SegmentationOutput {
  Tensor<T> logits;  // [H x W]
  std::vector<std::uint8_t> prediction;
  std::size_t height = 0, width = 0;
};

/// prediction = logit > 0.
template <typename T>
std::vector<std::uint8_t> threshold_logits(std::span<const T> logits);

/// Linear head to one logit per cell, then bilinear resize to the output size.
template <typename T>
SegmentationOutput<T> predict_mask(const Linear<T>& head, const Tensor<T>& features, Grid grid, std::size_t out_h,
                                   std::size_t out_w);

template <typename T>
struct SegmentationLoss {
  Tensor<T> total;
  Tensor<T> bce;
  Tensor<T> dice;
};

/// Mean BCE-with-logits plus soft Dice loss with smoothing 1.
template <typename T>
SegmentationLoss<T> segmentation_loss(const Tensor<T>& logits, std::span<const std::uint8_t> target);

template <typename T>
struct DecoderOutput {
  SegmentationOutput<T> segmentation;
  std::vector<Tensor<T>> stage_features;
  std::vector<Grid> grids;
  std::vector<ops::AttentionProbs<T>> attention;  // filled when requested
};

template <typename T>
class SegmentationDecoder {
 public:
  SegmentationDecoder() = default;
  SegmentationDecoder(const ModelConfig& cfg, Rng& rng);

  DecoderOutput<T> decode(const VisionFeatures<T>& vision, const KeyValueTokens<T>& kv, std::size_t out_h,
                          std::size_t out_w, bool record_attention = false) const;
  void collect(ParameterList<T>& params, const std::string& prefix) const;

  std::vector<Linear<T>> fuse;
  std::vector<AttentionBlock<T>> stages;
  Linear<T> head;
};

extern template class SegmentationDecoder<float>;
extern template class SegmentationDecoder<double>;

}  // namespace vipa
