#include <doctest.h>

#include <cmath>

#include "kit.hpp"
#include "vipa/encoders.hpp"
#include "vipa/veg.hpp"
#include "vipa/vocabulary.hpp"

using namespace vipa;
using testkit::random_tensor;
using TD = Tensor<double>;

namespace {

std::vector<double> vec(const TD& t) { return {t.values().begin(), t.values().end()}; }

ModelConfig veg_config() {
  ModelConfig cfg;
  cfg.base_channels = 2;  // stage-4 width 16 == model_dim
  cfg.model_dim = 16;
  cfg.joint_dim = 8;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.vocab_size = Vocabulary::scene_grammar().size();
  return cfg;
}

BlockOptions plain_block(std::size_t dim, std::size_t heads) {
  BlockOptions opts;
  opts.attention = {dim, heads};
  opts.mlp_ratio = 2;
  opts.pre_norm = false;
  return opts;
}

RetrievalResult<double> eval_retrieve(const std::vector<double>& row, double ratio) {
  TD s({1, row.size()}, row);
  return retrieve_informative_tokens(s, {1}, ratio, TD::scalar(1.0), RetrievalMode::eval, nullptr);
}

}  // namespace

TEST_SUITE("veg") {
  TEST_CASE("cosine similarity examples") {
    TD a({3, 2}, {1, 2, 1, 0, 1, 0});
    TD b({3, 2}, {1, 2, 0, 3, -2, 0});
    const auto s = cosine_similarity(a, b);
    CHECK(s.at(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(s.at(1, 1) == 0.0);
    CHECK(s.at(2, 2) == doctest::Approx(-1.0).epsilon(1e-15));

    TD z({1, 2}, {0, 0});
    const auto dead = cosine_similarity(z, b);
    for (double v : dead.values()) CHECK(v == 0.0);

    Rng rng(1);
    auto x = random_tensor({3, 6}, rng), y = random_tensor({5, 6}, rng);
    const auto c = cosine_similarity(x, y);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double dot = 0, nx = 0, ny = 0;
        for (std::size_t k = 0; k < 6; ++k) {
          dot += x.at(i, k) * y.at(j, k);
          nx += x.at(i, k) * x.at(i, k);
          ny += y.at(j, k) * y.at(j, k);
        }
        CHECK(std::abs(c.at(i, j) - dot / (std::sqrt(nx) * std::sqrt(ny))) <= 1e-12);
        CHECK(std::abs(c.at(i, j)) <= 1.0);
      }
  }

  TEST_CASE("retrieval count and tie rule") {
    CHECK(retrieval_count(0.3, 4) == 1);
    CHECK(retrieval_count(0.3, 10) == 3);
    CHECK(retrieval_count(0.3, 256) == 76);
    CHECK(retrieval_count(1.0, 7) == 7);
    CHECK(retrieval_count(0.01, 7) == 1);
    CHECK_THROWS_AS(retrieval_count(0.0, 4), ParameterError);
    CHECK_THROWS_AS(retrieval_count(1.5, 4), ParameterError);

    CHECK(eval_retrieve({0.9, 0.1, 0.9, 0.2}, 0.5).indices[0] == std::vector<std::size_t>{0, 2});
    CHECK(eval_retrieve({0.5, 0.5, 0.5, 0.1}, 0.5).indices[0] == std::vector<std::size_t>{0, 1});
    const auto all = eval_retrieve({0.3, -0.1, 0.8}, 1.0);
    CHECK(all.hard_mask == std::vector<std::uint8_t>{1, 1, 1});
  }

  TEST_CASE("train-mode retrieval matches the argsort oracle on seeded noise") {
    Rng rng(2);
    auto s = random_tensor({2, 8}, rng);
    const double tau = 0.7;
    Rng noise(99);
    const auto res =
        retrieve_informative_tokens(s, {1, 1}, 3.0 / 8.0, TD::scalar(tau), RetrievalMode::train, &noise);
    CHECK(res.keep_count == 3);
    Rng again(99);
    const auto g = sample_gumbel<double>({2, 8}, again);
    for (std::size_t j = 0; j < 2; ++j) {
      std::vector<double> row(8);
      double z = 0;
      for (std::size_t n = 0; n < 8; ++n) z += row[n] = std::exp((s.at(j, n) + g.at(j, n)) / tau);
      for (auto& v : row) v /= z;
      CHECK(res.indices[j] == testkit::argsort_top_k(row, 3));
    }
  }

  TEST_CASE("eval retrieval ignores the seed; invalid rows select nothing") {
    Rng rng(3);
    auto s = random_tensor({3, 10}, rng);
    Rng r1(1), r2(2);
    const auto a = retrieve_informative_tokens(s, {1, 0, 1}, 0.3, TD::scalar(1.0), RetrievalMode::eval, &r1);
    const auto b = retrieve_informative_tokens(s, {1, 0, 1}, 0.3, TD::scalar(1.0), RetrievalMode::eval, &r2);
    CHECK(a.hard_mask == b.hard_mask);
    CHECK(a.indices[1].empty());
    for (std::size_t n = 0; n < 10; ++n) CHECK(a.hard_mask[10 + n] == 0);
    CHECK(testkit::retrieval_invariants(200).pass);
  }

  TEST_CASE("straight-through mask carries hard values forward") {
    Rng rng(4);
    auto s = random_tensor({2, 6}, rng, -1, 1, true);
    Rng noise(5);
    const auto res = retrieve_informative_tokens(s, {1, 1}, 0.5, TD::scalar(1.0), RetrievalMode::train, &noise);
    for (std::size_t i = 0; i < 12; ++i) CHECK(res.mask.at(i) == static_cast<double>(res.hard_mask[i]));
    ops::sum(res.mask).backward();
    CHECK(s.has_grad());
  }

  TEST_CASE("contrastive loss examples") {
    ContrastiveTargets pos{{1}}, neg{{0}};
    CHECK(pixel_contrastive_loss(TD({1, 1}, {0.0}), pos).item() == doctest::Approx(0.693147).epsilon(1e-6));
    CHECK(pixel_contrastive_loss(TD({1, 1}, {0.0}), neg).item() == doctest::Approx(0.693147).epsilon(1e-6));
    ContrastiveTargets mixed{{1, 0, 1, 0}};
    CHECK(pixel_contrastive_loss(TD({1, 4}, {40, -40, 40, -40}), mixed).item() <= 1e-15);
    // Empty positive set: negatives only.
    ContrastiveTargets none{{0, 0}};
    CHECK(pixel_contrastive_loss(TD({1, 2}, {0.0, 0.0}), none).item() == doctest::Approx(0.693147).epsilon(1e-6));
  }

  TEST_CASE("contrastive targets from the mask") {
    std::vector<std::uint8_t> mask(8 * 8, 0);
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) mask[y * 8 + x] = 1;  // fills cell (0,0)
    mask[7 * 8 + 7] = 1;                                          // one pixel of cell (1,1)
    const auto t = contrastive_targets_from_mask(mask, 8, 8, {2, 2});
    CHECK(t.positive == std::vector<std::uint8_t>{1, 0, 0, 0});
    CHECK(t.positives() == 1);
  }

  TEST_CASE("aggregation examples") {
    Rng rng(6);
    auto cfg = veg_config();
    VisualExpressionGenerator<double> veg(cfg, rng);
    identity_fill(veg.aggregate_proj);
    auto fv = random_tensor({4, 16}, rng);
    TD one({1, 4}, {0, 0, 1, 0});
    const auto a = veg.aggregate(fv, one);
    for (std::size_t c = 0; c < 16; ++c) CHECK(a.at(0, c) == fv.at(2, c));

    TD same({2, 3}, {1.5, -2, 0.25, 1.5, -2, 0.25});
    const auto twice = masked_token_sum(same, TD({1, 2}, {1, 1}));
    CHECK(vec(twice) == std::vector<double>{3, -4, 0.5});

    auto m = TD({2, 4}, {1, 0, 1, 1, 0, 1, 0, 0});
    const auto sum = masked_token_sum(fv, m);
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t c = 0; c < 16; ++c) {
        double acc = 0;
        for (std::size_t n = 0; n < 4; ++n) acc += m.at(j, n) * fv.at(n, c);
        CHECK(std::abs(sum.at(j, c) - acc) <= 1e-12);
      }
  }

  TEST_CASE("refinement examples") {
    Rng rng(7);
    AttentionBlock<double> block(4, 4, plain_block(4, 1), rng);
    identity_fill(block.attn.wv);
    identity_fill(block.attn.wo);
    zero_fill(block.mlp.fc2);
    auto fa = random_tensor({2, 4}, rng), fv = random_tensor({3, 4}, rng);
    const std::vector<std::uint8_t> hard = {0, 1, 0, 1, 0, 0}, valid = {1, 1};
    const auto fr = refine_visual_context(block, fa, fv, hard, valid);
    for (std::size_t c = 0; c < 4; ++c) {
      CHECK(fr.at(0, c) == doctest::Approx(fv.at(1, c) + fa.at(0, c)).epsilon(1e-12));
      CHECK(fr.at(1, c) == doctest::Approx(fv.at(0, c) + fa.at(1, c)).epsilon(1e-12));
    }

    AttentionBlock<double> quiet(4, 4, plain_block(4, 1), rng);
    zero_fill(quiet.attn.wo);
    zero_fill(quiet.mlp.fc2);
    CHECK(vec(refine_visual_context(quiet, fa, fv, hard, valid)) == vec(fa));

    // Random case: no weight outside M, rows sum to 1.
    AttentionBlock<double> any(4, 4, plain_block(4, 2), rng);
    const std::vector<std::uint8_t> m = {1, 0, 1, 0, 1, 1};
    ops::AttentionProbs<double> probs;
    refine_visual_context<double>(any, fa, fv, m, valid, nullptr, &probs);
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t i = 0; i < 2; ++i) {
        double total = 0;
        for (std::size_t j = 0; j < 3; ++j) {
          if (!m[i * 3 + j]) CHECK(probs.at(h, i, j) == 0.0);
          total += probs.at(h, i, j);
        }
        CHECK(std::abs(total - 1.0) <= 1e-9);
      }
  }

  TEST_CASE("attribute sharing examples") {
    Rng rng(8);
    AttentionBlock<double> block(4, 4, plain_block(4, 1), rng);
    identity_fill(block.attn.wq);
    identity_fill(block.attn.wk);
    identity_fill(block.attn.wv);
    identity_fill(block.attn.wo);
    zero_fill(block.mlp.fc2);
    TD v({1, 4}, {0.5, -1, 2, 0.25});
    const auto out = share_visual_attributes(block, v, {1});
    for (std::size_t c = 0; c < 4; ++c) CHECK(out.at(0, c) == doctest::Approx(2 * v.at(c)).epsilon(1e-12));

    AttentionBlock<double> any(4, 4, plain_block(4, 2), rng);
    TD rows({3, 4}, {1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4});
    const auto same = share_visual_attributes(any, rows, {1, 1, 1});
    for (std::size_t i = 1; i < 3; ++i)
      for (std::size_t c = 0; c < 4; ++c) CHECK(same.at(i, c) == same.at(0, c));

    auto fr = random_tensor({3, 4}, rng);
    auto padded = ops::concat_rows<double>({fr, random_tensor({2, 4}, rng)});
    const auto a = share_visual_attributes(any, fr, {1, 1, 1});
    const auto b = share_visual_attributes(any, padded, {1, 1, 1, 0, 0});
    for (std::size_t i = 0; i < 12; ++i) CHECK(std::abs(a.at(i) - b.at(i)) <= 1e-12);
  }

  TEST_CASE("generator switches") {
    Rng rng(9);
    auto cfg = veg_config();
    VisualExpressionGenerator<double> veg(cfg, rng);
    auto fv = random_tensor({16, 16}, rng);
    AdvancedLinguisticTokens<double> lang{random_tensor({4, 16}, rng), {1, 1, 1, 0}};
    const std::vector<std::uint8_t> cues = {1, 1, 1, 0};

    VegOptions<double> full;
    full.ratio = 1.0;
    full.mode = RetrievalMode::eval;
    VegOptions<double> no_step1 = full;
    no_step1.use_retrieval = false;
    no_step1.ratio = 0.3;
    CHECK(vec(veg.generate(fv, lang, cues, nullptr, full).expression.tokens) ==
          vec(veg.generate(fv, lang, cues, nullptr, no_step1).expression.tokens));

    VegOptions<double> no_step2 = full;
    no_step2.ratio = 0.3;
    no_step2.use_refinement = false;
    const auto out = veg.generate(fv, lang, cues, nullptr, no_step2);
    CHECK(vec(out.expression.tokens) == vec(out.expression.aggregated));
    CHECK(!out.contrastive_loss.defined());

    ContrastiveTargets targets;
    targets.positive.assign(16, 0);
    targets.positive[3] = 1;
    const auto with = veg.generate(fv, lang, cues, &targets, full);
    CHECK(with.contrastive_loss.defined());
    CHECK(with.contrastive_logits.shape() == Shape{1, 16});
  }

  TEST_CASE("contrastive toy converges") {
    const auto r = testkit::contrastive_toy(200);
    INFO(r.detail);
    CHECK(r.pass);
  }
}
