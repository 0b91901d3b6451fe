#include "vipa/encoders.hpp"

#include <cmath>

#include "vipa/vocabulary.hpp"

namespace vipa {

template <typename T>
Tensor<T> image_tensor(const SceneImage& img) {
  if (img.pixels.size() != img.height * img.width * 3) throw DimensionError("image pixel buffer size");
  std::vector<T> v(img.pixels.begin(), img.pixels.end());
  return Tensor<T>({img.height * img.width, 3}, std::move(v));
}

std::vector<std::size_t> patch_gather_index(Grid grid, std::size_t channels, std::size_t patch) {
  if (grid.h % patch || grid.w % patch) {
    throw DimensionError("grid " + std::to_string(grid.h) + "x" + std::to_string(grid.w) + " not divisible by " +
                         std::to_string(patch));
  }
  const std::size_t oh = grid.h / patch, ow = grid.w / patch;
  std::vector<std::size_t> idx;
  idx.reserve(grid.cells() * channels);
  for (std::size_t by = 0; by < oh; ++by)
    for (std::size_t bx = 0; bx < ow; ++bx)
      for (std::size_t dy = 0; dy < patch; ++dy)
        for (std::size_t dx = 0; dx < patch; ++dx)
          for (std::size_t c = 0; c < channels; ++c)
            idx.push_back(((by * patch + dy) * grid.w + bx * patch + dx) * channels + c);
  return idx;
}

std::vector<std::size_t> upsample2x_index(Grid grid, std::size_t channels) {
  std::vector<std::size_t> idx;
  idx.reserve(grid.cells() * 4 * channels);
  for (std::size_t y = 0; y < grid.h * 2; ++y)
    for (std::size_t x = 0; x < grid.w * 2; ++x)
      for (std::size_t c = 0; c < channels; ++c) idx.push_back(((y / 2) * grid.w + x / 2) * channels + c);
  return idx;
}

// ---------------------------------------------------------------- vision

template <typename T>
VisionEncoder<T>::VisionEncoder(const ModelConfig& cfg, Rng& rng)
    : base_channels_(cfg.base_channels), pre_norm_(cfg.pre_norm) {
  const std::size_t p = ModelConfig::kPatch;
  patch_embed = Linear<T>(p * p * 3, cfg.base_channels, rng);
  const std::size_t g = cfg.image_size / p;
  std::vector<T> rows(g * cfg.base_channels), cols(g * cfg.base_channels);
  for (auto& v : rows) v = static_cast<T>(uniform(rng, -0.1, 0.1));
  for (auto& v : cols) v = static_cast<T>(uniform(rng, -0.1, 0.1));
  pos_row = Tensor<T>({g, cfg.base_channels}, std::move(rows), true);
  pos_col = Tensor<T>({g, cfg.base_channels}, std::move(cols), true);
  for (std::size_t s = 0; s < ModelConfig::kStages; ++s) {
    const std::size_t c = cfg.stage_channels(s);
    blocks_.emplace_back(c, c, cfg.block_options(c), rng);
    if (s + 1 < ModelConfig::kStages) {
      merge_norms_.emplace_back(4 * c);
      merge_proj_.emplace_back(4 * c, cfg.stage_channels(s + 1), rng);
    }
  }
}

template <typename T>
Tensor<T> VisionEncoder<T>::embed(const SceneImage& img, Grid& grid) const {
  const std::size_t p = ModelConfig::kPatch;
  const std::size_t stride = p << (ModelConfig::kStages - 1);
  if (img.height % stride || img.width % stride || img.height == 0 || img.width == 0) {
    throw DimensionError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                         " must be a multiple of " + std::to_string(stride) + " on both sides");
  }
  grid = {img.height / p, img.width / p};
  if (grid.h > pos_row.shape()[0] || grid.w > pos_col.shape()[0]) {
    throw DimensionError("image larger than the configured resolution");
  }
  const auto idx = patch_gather_index({img.height, img.width}, 3, p);
  auto patches = ops::gather(image_tensor<T>(img), {grid.cells(), p * p * 3}, idx);
  auto x = patch_embed(patches);
  std::vector<std::size_t> ry, cx;
  for (std::size_t y = 0; y < grid.h; ++y)
    for (std::size_t xx = 0; xx < grid.w; ++xx) {
      ry.push_back(y);
      cx.push_back(xx);
    }
  x = ops::add(x, ops::gather_rows(pos_row, ry));
  return ops::add(x, ops::gather_rows(pos_col, cx));
}

template <typename T>
Tensor<T> VisionEncoder<T>::merge(std::size_t stage, const Tensor<T>& x, Grid& grid) const {
  const std::size_t c = x.cols();
  const auto idx = patch_gather_index(grid, c, 2);
  grid = {grid.h / 2, grid.w / 2};
  auto merged = ops::gather(x, {grid.cells(), 4 * c}, idx);
  if (pre_norm_) merged = merge_norms_[stage](merged);
  return merge_proj_[stage](merged);
}

template <typename T>
void VisionEncoder<T>::collect(ParameterList<T>& params, const std::string& prefix) const {
  patch_embed.collect(params, prefix + ".patch_embed");
  params.add(prefix + ".pos_row", pos_row);
  params.add(prefix + ".pos_col", pos_col);
  for (std::size_t s = 0; s < blocks_.size(); ++s) {
    blocks_[s].collect(params, prefix + ".stage" + std::to_string(s + 1));
    if (s < merge_proj_.size()) {
      if (pre_norm_) merge_norms_[s].collect(params, prefix + ".merge" + std::to_string(s + 1) + ".norm");
      merge_proj_[s].collect(params, prefix + ".merge" + std::to_string(s + 1) + ".proj");
    }
  }
}

// -------------------------------------------------------------- language

template <typename T>
Tensor<T> sinusoidal_positions(std::size_t length, std::size_t dim) {
  std::vector<T> v(length * dim);
  for (std::size_t pos = 0; pos < length; ++pos)
    for (std::size_t i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      const double a = static_cast<double>(pos) * freq;
      v[pos * dim + i] = static_cast<T>(i % 2 == 0 ? std::sin(a) : std::cos(a));
    }
  return Tensor<T>({length, dim}, std::move(v));
}

template <typename T>
LanguageEncoder<T>::LanguageEncoder(const ModelConfig& cfg, Rng& rng)
    : dim_(cfg.model_dim), max_tokens_(cfg.max_tokens) {
  std::vector<T> e(cfg.vocab_size * cfg.model_dim), c(cfg.model_dim);
  for (auto& v : e) v = static_cast<T>(uniform(rng, -1.0, 1.0));
  for (auto& v : c) v = static_cast<T>(uniform(rng, -1.0, 1.0));
  embedding = Tensor<T>({cfg.vocab_size, cfg.model_dim}, std::move(e), true);
  cls = Tensor<T>({1, cfg.model_dim}, std::move(c), true);
  for (std::size_t i = 0; i < cfg.language_layers; ++i)
    blocks.emplace_back(cfg.model_dim, cfg.model_dim, cfg.block_options(cfg.model_dim), rng);
}

template <typename T>
LinguisticTokens<T> LanguageEncoder<T>::encode(std::span<const std::size_t> word_ids, std::size_t pad_to) const {
  const std::size_t vocab = embedding.shape()[0];
  for (auto id : word_ids) {
    if (id >= vocab) throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
  }
  const std::size_t n_valid = word_ids.size() + 1;
  if (n_valid > max_tokens_) {
    throw std::invalid_argument("expression has " + std::to_string(word_ids.size()) + " words; at most " +
                                std::to_string(max_tokens_ - 1) + " allowed");
  }
  const std::size_t length = std::max(n_valid, pad_to);
  LinguisticTokens<T> out;
  out.word_ids.assign(word_ids.begin(), word_ids.end());
  out.valid.assign(length, 0);
  std::fill_n(out.valid.begin(), n_valid, 1);

  std::vector<Tensor<T>> rows{cls};
  if (!word_ids.empty()) rows.push_back(ops::gather_rows(embedding, word_ids));
  if (length > n_valid) rows.push_back(Tensor<T>::zeros({length - n_valid, dim_}));
  auto x = ops::add(ops::concat_rows(rows), sinusoidal_positions<T>(length, dim_));
  const auto mask = broadcast_key_mask(out.valid, length);
  for (const auto& b : blocks) x = b(x, x, mask, out.valid);
  out.tokens = x;
  return out;
}

template <typename T>
void LanguageEncoder<T>::collect(ParameterList<T>& params, const std::string& prefix) const {
  params.add(prefix + ".embedding", embedding);
  params.add(prefix + ".cls", cls);
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(params, prefix + ".block" + std::to_string(i));
}

// ---------------------------------------------------------------- fusion

template <typename T>
FusionBlock<T>::FusionBlock(std::size_t lang_dim, std::size_t vision_dim, const ModelConfig& cfg, Rng& rng)
    : language_side(lang_dim, vision_dim, cfg.block_options(lang_dim), rng),
      vision_side(vision_dim, lang_dim, cfg.block_options(vision_dim), rng) {}

template <typename T>
Tensor<T> FusionBlock<T>::advance(const Tensor<T>& lang, const std::vector<std::uint8_t>& valid,
                                  const Tensor<T>& vision) const {
  return language_side(lang, vision, {}, valid);
}

template <typename T>
Tensor<T> FusionBlock<T>::inform(const Tensor<T>& vision, const Tensor<T>& lang,
                                 const std::vector<std::uint8_t>& valid) const {
  return vision_side(vision, lang, broadcast_key_mask(valid, vision.rows()));
}

template <typename T>
void FusionBlock<T>::collect(ParameterList<T>& params, const std::string& prefix) const {
  language_side.collect(params, prefix + ".lang");
  vision_side.collect(params, prefix + ".vision");
}

template <typename T>
AdvancedLinguisticTokens<T> advance_linguistic_tokens(std::span<const FusionBlock<T>> blocks,
                                                      const LinguisticTokens<T>& lang, const Tensor<T>& vision) {
  auto x = lang.tokens;
  for (const auto& b : blocks) x = b.advance(x, lang.valid, vision);
  return {x, lang.valid};
}

// -------------------------------------------------------------- encoders

template <typename T>
Encoders<T>::Encoders(const ModelConfig& cfg, Rng& rng)
    : mode(cfg.fusion), vision(cfg, rng), language(cfg, rng), image_size_(cfg.image_size) {
  switch (cfg.fusion) {
    case FusionMode::none: break;
    case FusionMode::late: fusion_stages_ = {ModelConfig::kStages - 1}; break;
    case FusionMode::early: fusion_stages_ = {ModelConfig::kStages - 2, ModelConfig::kStages - 1}; break;
  }
  for (auto s : fusion_stages_) fusion.emplace_back(cfg.model_dim, cfg.stage_channels(s), cfg, rng);
}

template <typename T>
EncodedInputs<T> Encoders<T>::encode(const SceneImage& img, std::span<const std::size_t> word_ids,
                                     std::size_t pad_to) const {
  EncodedInputs<T> out;
  out.language = language.encode(word_ids, pad_to);
  const auto& valid = out.language.valid;
  Grid grid;
  auto x = vision.embed(img, grid);
  auto lang = out.language.tokens;
  std::size_t next_fusion = 0;
  for (std::size_t s = 0; s < ModelConfig::kStages; ++s) {
    x = vision.stage_block(s, x);
    if (next_fusion < fusion_stages_.size() && fusion_stages_[next_fusion] == s) {
      const auto& fb = fusion[next_fusion++];
      auto advanced = fb.advance(lang, valid, x);
      x = fb.inform(x, lang, valid);
      lang = advanced;
    }
    out.vision.stages.push_back(x);
    out.vision.grids.push_back(grid);
    if (s + 1 < ModelConfig::kStages) x = vision.merge(s, x, grid);
  }
  out.advanced = {lang, valid};
  return out;
}

template <typename T>
void Encoders<T>::collect(ParameterList<T>& params, const std::string& prefix) const {
  vision.collect(params, prefix + ".vision");
  language.collect(params, prefix + ".language");
  for (std::size_t i = 0; i < fusion.size(); ++i)
    fusion[i].collect(params, prefix + ".fusion" + std::to_string(fusion_stages_[i] + 1));
}

template Tensor<float> image_tensor<float>(const SceneImage&);
template Tensor<double> image_tensor<double>(const SceneImage&);
template Tensor<float> sinusoidal_positions<float>(std::size_t, std::size_t);
template Tensor<double> sinusoidal_positions<double>(std::size_t, std::size_t);
template AdvancedLinguisticTokens<float> advance_linguistic_tokens(std::span<const FusionBlock<float>>,
                                                                   const LinguisticTokens<float>&, const Tensor<float>&);
template AdvancedLinguisticTokens<double> advance_linguistic_tokens(std::span<const FusionBlock<double>>,
                                                                    const LinguisticTokens<double>&,
                                                                    const Tensor<double>&);
template class VisionEncoder<float>;
template class VisionEncoder<double>;
template class LanguageEncoder<float>;
template class LanguageEncoder<double>;
template class FusionBlock<float>;
template class FusionBlock<double>;
template class Encoders<float>;
template class Encoders<double>;

}  // namespace vipa
