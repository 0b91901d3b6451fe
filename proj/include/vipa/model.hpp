#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "vipa/decoder.hpp"
#include "vipa/encoders.hpp"
#include "vipa/model_config.hpp"
#include "vipa/veg.hpp"

namespace vipa {

template <typename T>
struct ForwardOptions {
  RetrievalMode mode = RetrievalMode::eval;
  std::uint64_t gumbel_seed = 0;
  const RetrievalOverrides<T>* overrides = nullptr;
  /// Ground-truth mask at image resolution; enables the losses.
  std::span<const std::uint8_t> target;
  double contrastive_weight = 1.0;
  bool record_attention = false;
  /// Pads the linguistic tokens to this length (0 = no padding).
  std::size_t pad_to = 0;
};

template <typename T>
struct ForwardResult {
  EncodedInputs<T> encoded;
  std::vector<std::uint8_t> cue_valid;
  VegOutput<T> veg;
  KeyValueTokens<T> kv;
  DecoderOutput<T> decoder;
  Tensor<T> seg_loss;          // defined when a target was given
  Tensor<T> contrastive_loss;  // defined when a target was given and the weight is positive
  Tensor<T> loss;

  const SegmentationOutput<T>& segmentation() const { return decoder.segmentation; }
};

/// Encoders, visual expression generator and decoder with one parameter registry.
template <typename T>
class VipaModel {
 public:
  VipaModel(const ModelConfig& cfg, std::uint64_t init_seed);
  VipaModel(const VipaModel&) = delete;
  VipaModel& operator=(const VipaModel&) = delete;

  ForwardResult<T> forward(const SceneImage& image, std::span<const std::size_t> word_ids,
                           const ForwardOptions<T>& opts = {}) const;

  /// Retrieval cue flags: valid rows filtered by the global/local cue switches.
  std::vector<std::uint8_t> cue_flags(const std::vector<std::uint8_t>& valid) const;

  const ModelConfig& config() const { return cfg_; }
  ParameterList<T>& parameters() { return params_; }
  const ParameterList<T>& parameters() const { return params_; }

  Encoders<T> encoders;
  VisualExpressionGenerator<T> veg;
  SegmentationDecoder<T> decoder;

 private:
  ModelConfig cfg_;
  ParameterList<T> params_;
};

extern template class VipaModel<float>;
extern template class VipaModel<double>;

}  // namespace vipa
