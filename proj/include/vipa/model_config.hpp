#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "vipa/numerics/layers.hpp"

namespace vipa {

/// Where the encoders exchange information between modalities.
enum class FusionMode { none, late, early };

/// Which token set the segmentation decoder attends over.
enum class KeyValueSource { ve, advanced_le, vanilla_le };

FusionMode parse_fusion_mode(const std::string& s);
KeyValueSource parse_kv_source(const std::string& s);
std::string to_string(FusionMode m);
std::string to_string(KeyValueSource s);

struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t base_channels = 16;  // C_1; doubles per vision stage
  std::size_t model_dim = 64;      // D, linguistic / visual-expression width
  std::size_t joint_dim = 64;      // width of the relevance embedding space
  std::size_t heads = 4;
  double mlp_ratio = 4.0;          // MLP hidden width = ratio * input width
  std::size_t vocab_size = 0;
  std::size_t max_tokens = 21;     // [CLS] + up to 20 words
  std::size_t language_layers = 2;
  FusionMode fusion = FusionMode::early;
  KeyValueSource kv_source = KeyValueSource::ve;
  double retrieval_ratio = 0.30;
  double tau_init = 1.0;
  double contrast_scale_init = 10.0;
  std::vector<std::size_t> decoder_dims = {64, 32, 32};
  Activation activation = Activation::gelu;
  bool pre_norm = true;

  // Visual-expression-generator ablation switches.
  bool use_retrieval = true;   // step 1: token retrieval (off = attend to all tokens)
  bool use_refinement = true;  // step 2: masked cross-attention + attribute sharing
  bool global_cue = true;      // [CLS] row acts as a retrieval cue
  bool local_cue = true;       // word rows act as retrieval cues

  static constexpr std::size_t kStages = 4;
  static constexpr std::size_t kPatch = 4;

  std::size_t stage_channels(std::size_t stage) const { return base_channels << stage; }
  BlockOptions block_options(std::size_t width) const;
  void validate() const;
};

}  // namespace vipa
