#include "vipa/decoder.hpp"

#include <string>

namespace vipa {

template <typename T>
KeyValueTokens<T> select_keyvalue_source(KeyValueSource source, const EncodedInputs<T>& encoded,
                                         const VisualExpression<T>& expression) {
  switch (source) {
    case KeyValueSource::ve: return {expression.tokens, expression.valid, source};
    case KeyValueSource::advanced_le: return {encoded.advanced.tokens, encoded.advanced.valid, source};
    case KeyValueSource::vanilla_le: return {encoded.language.tokens, encoded.language.valid, source};
  }
  throw std::invalid_argument("unknown key-value source");
}

template <typename T>
Tensor<T> decode_stage(const AttentionBlock<T>& block, const Tensor<T>& features, const KeyValueTokens<T>& kv,
                       Tensor<T>* intermediate, ops::AttentionProbs<T>* probs) {
  if (kv.valid.size() != kv.tokens.rows()) throw DimensionError("decoder: kv validity vs kv rows");
  const auto mask = broadcast_key_mask(kv.valid, features.rows());
  auto f_o = block.attend(features, kv.tokens, mask, {}, probs);
  if (intermediate) *intermediate = f_o;
  return block.feed_forward(f_o);
}

template <typename T>
Tensor<T> upsample_and_fuse(const Linear<T>& reduce, const Tensor<T>& decoded, Grid grid, const Tensor<T>& skip,
                            Grid skip_grid) {
  if (decoded.rows() != grid.cells()) throw DimensionError("decoder: features do not match their grid");
  if (skip_grid.h != 2 * grid.h || skip_grid.w != 2 * grid.w || skip.rows() != skip_grid.cells()) {
    throw DimensionError("decoder: skip grid " + std::to_string(skip_grid.h) + "x" + std::to_string(skip_grid.w) +
                         " is not twice " + std::to_string(grid.h) + "x" + std::to_string(grid.w));
  }
  const std::size_t c = decoded.cols();
  const auto idx = upsample2x_index(grid, c);
  auto up = ops::gather(decoded, {skip_grid.cells(), c}, idx);
  return reduce(ops::concat_cols<T>({up, skip}));
}

template <typename T>
std::vector<std::uint8_t> threshold_logits(std::span<const T> logits) {
  std::vector<std::uint8_t> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] > T(0) ? 1 : 0;
  return out;
}

template <typename T>
SegmentationOutput<T> predict_mask(const Linear<T>& head, const Tensor<T>& features, Grid grid, std::size_t out_h,
                                   std::size_t out_w) {
  if (features.rows() != grid.cells()) throw DimensionError("predict_mask: features do not match their grid");
  auto cell_logits = head(features);
  SegmentationOutput<T> out;
  out.height = out_h;
  out.width = out_w;
  out.logits = ops::bilinear_resize(cell_logits, grid.h, grid.w, out_h, out_w).reshape({out_h, out_w});
  out.prediction = threshold_logits(out.logits.values());
  return out;
}

template <typename T>
SegmentationLoss<T> segmentation_loss(const Tensor<T>& logits, std::span<const std::uint8_t> target) {
  if (logits.numel() != target.size()) {
    throw DimensionError("segmentation loss: " + std::to_string(logits.numel()) + " logits vs " +
                         std::to_string(target.size()) + " target pixels");
  }
  std::vector<T> y(target.begin(), target.end());
  std::size_t positives = 0;
  for (auto v : target) positives += v ? 1 : 0;
  const std::size_t n = y.size();
  const Tensor<T> gt({n}, std::move(y));
  const auto x = logits.reshape({logits.numel()});

  SegmentationLoss<T> loss;
  loss.bce = ops::mean(ops::sub(ops::softplus(x), ops::mul(x, gt)));
  const auto p = ops::sigmoid(x);
  const auto num = ops::add_scalar(ops::scale(ops::sum(ops::mul(p, gt)), T(2)), T(1));
  const auto den = ops::add_scalar(ops::sum(p), static_cast<T>(positives) + T(1));
  loss.dice = ops::add_scalar(ops::scale(ops::div_scalar(num, den), T(-1)), T(1));
  loss.total = ops::add(loss.bce, loss.dice);
  return loss;
}

template <typename T>
SegmentationDecoder<T>::SegmentationDecoder(const ModelConfig& cfg, Rng& rng) {
  std::size_t prev = cfg.stage_channels(ModelConfig::kStages - 1);
  for (std::size_t i = 0; i + 1 < ModelConfig::kStages; ++i) {
    const std::size_t skip = cfg.stage_channels(ModelConfig::kStages - 2 - i);
    const std::size_t width = cfg.decoder_dims[i];
    fuse.emplace_back(prev + skip, width, rng);
    stages.emplace_back(width, cfg.model_dim, cfg.block_options(width), rng);
    prev = width;
  }
  head = Linear<T>(prev, 1, rng);
}

template <typename T>
DecoderOutput<T> SegmentationDecoder<T>::decode(const VisionFeatures<T>& vision, const KeyValueTokens<T>& kv,
                                                std::size_t out_h, std::size_t out_w, bool record_attention) const {
  DecoderOutput<T> out;
  const std::size_t top = vision.stages.size() - 1;
  auto x = vision.stages[top];
  Grid grid = vision.grids[top];
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::size_t skip = top - 1 - i;
    x = upsample_and_fuse(fuse[i], x, grid, vision.stages[skip], vision.grids[skip]);
    grid = vision.grids[skip];
    ops::AttentionProbs<T> probs;
    x = decode_stage<T>(stages[i], x, kv, nullptr, record_attention ? &probs : nullptr);
    if (record_attention) out.attention.push_back(std::move(probs));
    out.stage_features.push_back(x);
    out.grids.push_back(grid);
  }
  out.segmentation = predict_mask(head, x, grid, out_h, out_w);
  return out;
}

template <typename T>
void SegmentationDecoder<T>::collect(ParameterList<T>& params, const std::string& prefix) const {
  for (std::size_t i = 0; i < stages.size(); ++i) {
    fuse[i].collect(params, prefix + ".fuse" + std::to_string(i + 1));
    stages[i].collect(params, prefix + ".stage" + std::to_string(i + 1));
  }
  head.collect(params, prefix + ".head");
}

#define VIPA_INSTANTIATE_DECODER(T)                                                                              \
  template KeyValueTokens<T> select_keyvalue_source(KeyValueSource, const EncodedInputs<T>&,                   \
                                                    const VisualExpression<T>&);                               \
  template Tensor<T> decode_stage(const AttentionBlock<T>&, const Tensor<T>&, const KeyValueTokens<T>&,        \
                                  Tensor<T>*, ops::AttentionProbs<T>*);                                        \
  template Tensor<T> upsample_and_fuse(const Linear<T>&, const Tensor<T>&, Grid, const Tensor<T>&, Grid);      \
  template std::vector<std::uint8_t> threshold_logits<T>(std::span<const T>);                                  \
  template SegmentationOutput<T> predict_mask(const Linear<T>&, const Tensor<T>&, Grid, std::size_t,           \
                                              std::size_t);                                                    \
  template SegmentationLoss<T> segmentation_loss(const Tensor<T>&, std::span<const std::uint8_t>);             \
  template class SegmentationDecoder<T>;

VIPA_INSTANTIATE_DECODER(float)
VIPA_INSTANTIATE_DECODER(double)

#undef VIPA_INSTANTIATE_DECODER

}  // namespace vipa
