#include "vipa/model_config.hpp"

#include <stdexcept>

namespace vipa {

FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "none") return FusionMode::none;
  if (s == "late") return FusionMode::late;
  if (s == "early") return FusionMode::early;
  throw std::invalid_argument("unknown fusion mode '" + s + "' (expected none, late or early)");
}

KeyValueSource parse_kv_source(const std::string& s) {
  if (s == "VE" || s == "ve") return KeyValueSource::ve;
  if (s == "advanced_LE" || s == "advanced_le") return KeyValueSource::advanced_le;
  if (s == "vanilla_LE" || s == "vanilla_le") return KeyValueSource::vanilla_le;
  throw std::invalid_argument("unknown key-value source '" + s + "' (expected VE, advanced_LE or vanilla_LE)");
}

std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::none: return "none";
    case FusionMode::late: return "late";
    case FusionMode::early: return "early";
  }
  return "?";
}

std::string to_string(KeyValueSource s) {
  switch (s) {
    case KeyValueSource::ve: return "VE";
    case KeyValueSource::advanced_le: return "advanced_LE";
    case KeyValueSource::vanilla_le: return "vanilla_LE";
  }
  return "?";
}

BlockOptions ModelConfig::block_options(std::size_t width) const {
  BlockOptions o;
  o.attention.model_dim = width;
  o.attention.num_heads = heads;
  o.mlp_ratio = mlp_ratio;
  o.pre_norm = pre_norm;
  o.activation = activation;
  return o;
}

void ModelConfig::validate() const {
  const std::size_t stride = kPatch << (kStages - 1);
  if (image_size == 0 || image_size % stride != 0) {
    throw std::invalid_argument("image size " + std::to_string(image_size) + " must be a positive multiple of " +
                                std::to_string(stride));
  }
  if (base_channels == 0 || model_dim == 0 || joint_dim == 0) throw std::invalid_argument("dims must be positive");
  if (heads == 0) throw std::invalid_argument("head count must be positive");
  for (std::size_t s = 0; s < kStages; ++s) {
    if (stage_channels(s) % heads != 0) throw std::invalid_argument("stage width not divisible by head count");
  }
  if (model_dim % heads != 0) throw std::invalid_argument("model dim not divisible by head count");
  if (decoder_dims.size() != kStages - 1) throw std::invalid_argument("decoder needs exactly 3 stage widths");
  for (auto d : decoder_dims)
    if (d == 0 || d % heads != 0) throw std::invalid_argument("decoder width not divisible by head count");
  if (!(retrieval_ratio > 0.0 && retrieval_ratio <= 1.0)) throw std::invalid_argument("retrieval ratio must be in (0, 1]");
  if (!(tau_init > 0.0)) throw std::invalid_argument("tau must be positive");
  if (!(contrast_scale_init > 0.0)) throw std::invalid_argument("contrast scale must be positive");
  if (mlp_ratio <= 0.0) throw std::invalid_argument("mlp ratio must be positive");
  if (vocab_size == 0) throw std::invalid_argument("vocabulary is empty");
  if (max_tokens < 1 || max_tokens > 21) throw std::invalid_argument("max tokens must be in [1, 21]");
  if (!global_cue && !local_cue) throw std::invalid_argument("at least one of global/local cue must be enabled");
}

}  // namespace vipa
