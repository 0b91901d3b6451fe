#include <doctest.h>

#include <cmath>

#include "kit.hpp"
#include "vipa/encoders.hpp"
#include "vipa/numerics/layers.hpp"
#include "vipa/vocabulary.hpp"

using namespace vipa;
using testkit::random_tensor;
using TD = Tensor<double>;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.base_channels = 16;
  cfg.model_dim = 16;
  cfg.joint_dim = 16;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.vocab_size = Vocabulary::scene_grammar().size();
  return cfg;
}

SceneImage random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  SceneImage img{h, w, std::vector<float>(h * w * 3)};
  for (auto& p : img.pixels) p = static_cast<float>(uniform_open01(rng));
  return img;
}

std::vector<std::size_t> words(const std::string& text) { return Vocabulary::scene_grammar().tokenize(text); }

double max_row_diff(const TD& a, const TD& b, std::size_t rows) {
  double worst = 0;
  for (std::size_t i = 0; i < rows * a.cols(); ++i) worst = std::max(worst, std::abs(a.at(i) - b.at(i)));
  return worst;
}

}  // namespace

TEST_SUITE("encoders") {
  TEST_CASE("stage shapes follow the stride schedule") {
    auto cfg = small_config();
    Rng rng(1);
    Encoders<double> enc(cfg, rng);
    const auto out = enc.encode(random_image(64, 64, 2), words("the red circle"));
    const std::vector<std::pair<std::size_t, std::size_t>> want = {{256, 16}, {64, 32}, {16, 64}, {4, 128}};
    REQUIRE(out.vision.stages.size() == 4);
    for (std::size_t s = 0; s < 4; ++s) {
      CHECK(out.vision.stages[s].shape() == Shape{want[s].first, want[s].second});
      CHECK(out.vision.grids[s].cells() == want[s].first);
    }
    CHECK(out.vision.token_count() == 4);
  }

  TEST_CASE("32x32 input has a single stage-4 token; other sizes are rejected") {
    auto cfg = small_config();
    Rng rng(1);
    Encoders<double> enc(cfg, rng);
    const auto out = enc.encode(random_image(32, 32, 3), words("a blue square"));
    CHECK(out.vision.grids.back() == Grid{1, 1});
    CHECK(out.vision.token_count() == 1);
    CHECK_THROWS_AS(enc.encode(random_image(48, 48, 3), words("a blue square")), DimensionError);
    CHECK_THROWS_AS(enc.encode(random_image(128, 128, 3), words("a blue square")), DimensionError);
  }

  TEST_CASE("zero image with zero biases gives zero features") {
    auto cfg = small_config();
    cfg.fusion = FusionMode::none;
    Rng rng(4);
    Encoders<double> enc(cfg, rng);
    ParameterList<double> params;
    enc.collect(params, "enc");
    for (const auto& e : params.entries()) {
      const auto& n = e.name;
      const bool bias = n.ends_with(".bias") || n.ends_with(".beta") || n.ends_with("pos_row") || n.ends_with("pos_col");
      if (!bias) continue;
      auto t = e.tensor;
      for (auto& v : t.mutable_values()) v = 0;
    }
    SceneImage zero{64, 64, std::vector<float>(64 * 64 * 3, 0.0f)};
    const auto out = enc.encode(zero, words("the red circle"));
    for (const auto& stage : out.vision.stages)
      for (double v : stage.values()) CHECK(v == 0.0);
  }

  TEST_CASE("language encoder basics") {
    auto cfg = small_config();
    Rng rng(5);
    LanguageEncoder<double> lang(cfg, rng);
    const auto empty = lang.encode(std::vector<std::size_t>{});
    CHECK(empty.length() == 1);
    CHECK(empty.valid == std::vector<std::uint8_t>{1});
    CHECK(empty.tokens.shape() == Shape{1, cfg.model_dim});

    const auto ids = words("the large green triangle");
    const auto a = lang.encode(ids), b = lang.encode(ids);
    CHECK(std::vector<double>(a.tokens.values().begin(), a.tokens.values().end()) ==
          std::vector<double>(b.tokens.values().begin(), b.tokens.values().end()));

    CHECK_THROWS_AS(lang.encode(std::vector<std::size_t>{999}), VocabularyError);
    CHECK_THROWS(lang.encode(std::vector<std::size_t>(21, 1)));
  }

  TEST_CASE("padding does not change valid rows") {
    auto cfg = small_config();
    Rng rng(6);
    LanguageEncoder<double> lang(cfg, rng);
    const auto ids = words("red circle left");
    const auto plain = lang.encode(ids);
    const auto padded = lang.encode(ids, 12);
    CHECK(plain.length() == 4);
    CHECK(padded.length() == 12);
    CHECK(padded.valid == std::vector<std::uint8_t>{1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0});
    CHECK(max_row_diff(plain.tokens, padded.tokens, 4) <= 1e-9);

    for (auto mode : {FusionMode::none, FusionMode::late, FusionMode::early}) {
      cfg.fusion = mode;
      Encoders<double> enc(cfg, rng);
      const auto img = random_image(64, 64, 7);
      const auto p = enc.encode(img, ids), q = enc.encode(img, ids, 16);
      CHECK(max_row_diff(p.advanced.tokens, q.advanced.tokens, 4) <= 1e-9);
      CHECK(max_row_diff(p.vision.tokens(), q.vision.tokens(), p.vision.token_count()) <= 1e-9);
    }
  }

  TEST_CASE("fusion with zeroed output layers is a pure residual") {
    auto cfg = small_config();
    Rng rng(8);
    std::vector<FusionBlock<double>> blocks;
    blocks.emplace_back(cfg.model_dim, 128, cfg, rng);
    blocks.emplace_back(cfg.model_dim, 128, cfg, rng);
    for (auto& b : blocks) {
      zero_fill(b.language_side.attn.wo);
      zero_fill(b.language_side.mlp.fc2);
    }
    LanguageEncoder<double> lang(cfg, rng);
    const auto e = lang.encode(words("the small yellow square"), 8);
    const auto vision = random_tensor({4, 128}, rng);
    const auto adv = advance_linguistic_tokens<double>(blocks, e, vision);
    CHECK(adv.tokens.shape() == e.tokens.shape());
    CHECK(adv.valid == e.valid);
    CHECK(max_row_diff(adv.tokens, e.tokens, e.length()) == 0.0);
  }

  TEST_CASE("constant key-value rows give identical attention outputs") {
    auto cfg = small_config();
    Rng rng(9);
    FusionBlock<double> block(cfg.model_dim, 32, cfg, rng);
    TD kv({5, 32}, std::vector<double>(5 * 32, 0.0));
    auto row = random_tensor({1, 32}, rng);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t c = 0; c < 32; ++c) kv.mutable_values()[i * 32 + c] = row.at(c);
    const auto q = random_tensor({3, cfg.model_dim}, rng);
    const auto out = block.language_side.attn(q, kv);
    for (std::size_t i = 1; i < 3; ++i)
      for (std::size_t c = 0; c < cfg.model_dim; ++c) CHECK(std::abs(out.at(i, c) - out.at(0, c)) <= 1e-12);
  }

  TEST_CASE("fusion modes wire differently") {
    auto cfg = small_config();
    std::vector<std::size_t> counts;
    for (auto mode : {FusionMode::none, FusionMode::late, FusionMode::early}) {
      cfg.fusion = mode;
      Rng rng(10);
      Encoders<double> enc(cfg, rng);
      ParameterList<double> params;
      enc.collect(params, "enc");
      counts.push_back(params.scalar_count());
      const auto out = enc.encode(random_image(64, 64, 11), words("the red circle"));
      CHECK(out.advanced.tokens.shape() == out.language.tokens.shape());
      if (mode == FusionMode::none) {
        CHECK(enc.fusion.empty());
        CHECK(max_row_diff(out.advanced.tokens, out.language.tokens, out.language.length()) == 0.0);
      }
    }
    CHECK(counts[0] < counts[1]);
    CHECK(counts[1] < counts[2]);
  }

  TEST_CASE("fusion stage placement") {
    auto cfg = small_config();
    Rng rng(12);
    cfg.fusion = FusionMode::late;
    CHECK(Encoders<double>(cfg, rng).fusion_stages() == std::vector<std::size_t>{3});
    cfg.fusion = FusionMode::early;
    CHECK(Encoders<double>(cfg, rng).fusion_stages() == std::vector<std::size_t>{2, 3});
    CHECK_THROWS(parse_fusion_mode("middle"));
    CHECK(parse_fusion_mode("early") == FusionMode::early);
  }

  TEST_CASE("tokenizer") {
    const auto vocab = Vocabulary::scene_grammar();
    const auto ids = vocab.tokenize("The RED  zebra");
    REQUIRE(ids.size() == 3);
    CHECK(ids[0] == vocab.id("the"));
    CHECK(ids[2] == vocab.id("<unk>"));
    CHECK(vocab.tokenize("a red circle", true) == vocab.tokenize("red circle"));
  }
}
