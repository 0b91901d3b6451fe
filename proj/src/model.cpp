#include "vipa/model.hpp"

namespace vipa {

template <typename T>
VipaModel<T>::VipaModel(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(init_seed);
  encoders = Encoders<T>(cfg_, rng);
  veg = VisualExpressionGenerator<T>(cfg_, rng);
  decoder = SegmentationDecoder<T>(cfg_, rng);
  encoders.collect(params_, "enc");
  veg.collect(params_, "veg");
  decoder.collect(params_, "dec");
}

template <typename T>
std::vector<std::uint8_t> VipaModel<T>::cue_flags(const std::vector<std::uint8_t>& valid) const {
  std::vector<std::uint8_t> cue(valid.size(), 0);
  for (std::size_t j = 0; j < valid.size(); ++j) {
    const bool enabled = j == 0 ? cfg_.global_cue : cfg_.local_cue;
    cue[j] = (valid[j] && enabled) ? 1 : 0;
  }
  return cue;
}

template <typename T>
ForwardResult<T> VipaModel<T>::forward(const SceneImage& image, std::span<const std::size_t> word_ids,
                                       const ForwardOptions<T>& opts) const {
  ForwardResult<T> r;
  r.encoded = encoders.encode(image, word_ids, opts.pad_to);
  r.cue_valid = cue_flags(r.encoded.advanced.valid);
  bool any_cue = false;
  for (auto c : r.cue_valid) any_cue = any_cue || c;
  if (!any_cue) throw DegenerateMaskError("no linguistic token is enabled as a retrieval cue");

  const bool with_target = !opts.target.empty();
  const bool with_contrast = with_target && opts.contrastive_weight > 0.0;
  ContrastiveTargets targets;
  if (with_contrast) {
    targets = contrastive_targets_from_mask(opts.target, image.height, image.width, r.encoded.vision.grids.back());
  }

  Rng gumbel_rng(opts.gumbel_seed);
  VegOptions<T> vo;
  vo.ratio = cfg_.retrieval_ratio;
  vo.mode = opts.mode;
  vo.rng = &gumbel_rng;
  vo.overrides = opts.overrides;
  vo.use_retrieval = cfg_.use_retrieval;
  vo.use_refinement = cfg_.use_refinement;
  r.veg = veg.generate(r.encoded.vision.tokens(), r.encoded.advanced, r.cue_valid, with_contrast ? &targets : nullptr,
                       vo);

  r.kv = select_keyvalue_source(cfg_.kv_source, r.encoded, r.veg.expression);
  r.decoder = decoder.decode(r.encoded.vision, r.kv, image.height, image.width, opts.record_attention);

  if (with_target) {
    r.seg_loss = segmentation_loss(r.decoder.segmentation.logits, opts.target).total;
    r.loss = r.seg_loss;
    if (with_contrast) {
      r.contrastive_loss = r.veg.contrastive_loss;
      r.loss = ops::add(r.loss, ops::scale(r.contrastive_loss, static_cast<T>(opts.contrastive_weight)));
    }
  }
  return r;
}

template class VipaModel<float>;
template class VipaModel<double>;

}  // namespace vipa
