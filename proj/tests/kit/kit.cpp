#include "kit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "vipa/data.hpp"
#include "vipa/decoder.hpp"
#include "vipa/metrics.hpp"
#include "vipa/model.hpp"
#include "vipa/numerics/gradcheck.hpp"
#include "vipa/numerics/layers.hpp"
#include "vipa/numerics/ops.hpp"
#include "vipa/numerics/optimizer.hpp"
#include "vipa/veg.hpp"
#include "vipa/vocabulary.hpp"

namespace vipa::testkit {

namespace {

using TensorD = Tensor<double>;

// Gradients whose norm is below this are compared absolutely; central
// differences of an O(1) loss carry ~1e-10 of rounding noise.
constexpr double kGradientFloor = 1e-6;

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
}

std::vector<std::uint8_t> random_bits(Rng& rng, std::size_t n, double p = 0.5) {
  std::vector<std::uint8_t> out(n);
  for (auto& b : out) b = uniform_open01(rng) < p ? 1 : 0;
  return out;
}

// Random [rows x cols] mask with at least one one per row.
std::vector<std::uint8_t> random_mask(Rng& rng, std::size_t rows, std::size_t cols) {
  auto m = random_bits(rng, rows * cols);
  for (std::size_t i = 0; i < rows; ++i) m[i * cols + pick(rng, 0, cols - 1)] = 1;
  return m;
}

TensorD weighted_sum(const TensorD& x, const TensorD& w) { return ops::sum(ops::mul(x, w)); }

std::vector<std::uint8_t> random_target(Rng& rng, std::size_t n) {
  auto t = random_bits(rng, n, 0.4);
  t[0] = 1;
  t[n - 1] = 0;
  return t;
}

struct GradCase {
  std::string name;
  // Runs one random instance and returns its gradient error.
  std::function<double(Rng&)> run;
};

std::vector<GradCase> gradient_cases() {
  std::vector<GradCase> cases;

  cases.push_back({"cosine relevance", [](Rng& rng) {
                     auto a = random_tensor({3, 5}, rng, -1, 1, true);
                     auto b = random_tensor({4, 5}, rng, -1, 1, true);
                     auto w = random_tensor({3, 4}, rng);
                     return gradient_error([&] { return weighted_sum(cosine_similarity(a, b), w); }, {a, b});
                   }});

  cases.push_back({"gumbel-softmax retrieval (straight-through)", [](Rng& rng) {
                     const std::size_t rows = 3, n = 8;
                     auto scores = random_tensor({rows, n}, rng, -1, 1, true);
                     auto log_tau = TensorD::scalar(uniform(rng, -0.5, 0.5), true);
                     auto features = random_tensor({n, 4}, rng);
                     auto w = random_tensor({rows, 4}, rng);
                     std::vector<std::uint8_t> cue = {1, 1, static_cast<std::uint8_t>(rng() & 1)};
                     const double ratio = 0.3;

                     RetrievalOverrides<double> base;
                     base.gumbel = sample_gumbel<double>({rows, n}, rng);
                     RetrievalResult<double> at_point;
                     {
                       NoGradGuard guard;
                       at_point = retrieve_informative_tokens(scores, cue, ratio, ops::exp(log_tau),
                                                              RetrievalMode::train, nullptr, &base);
                     }
                     RetrievalOverrides<double> st = base;
                     st.frozen_mask = at_point.hard_mask;
                     RetrievalOverrides<double> soft = st;
                     soft.soft_forward = true;
                     soft.anchor = at_point.perturbed.detach();

                     auto make = [&](const RetrievalOverrides<double>* o) {
                       return [&, o] {
                         auto r = retrieve_informative_tokens(scores, cue, ratio, ops::exp(log_tau),
                                                              RetrievalMode::train, nullptr, o);
                         return weighted_sum(ops::matmul(r.mask, features), w);
                       };
                     };
                     return gradient_error(make(&st), {scores, log_tau}, make(&soft));
                   }});

  cases.push_back({"masked multi-head cross-attention", [](Rng& rng) {
                     BlockOptions opts;
                     opts.attention = {8, 2};
                     opts.mlp_ratio = 2;
                     AttentionBlock<double> block(8, 6, opts, rng);
                     block.norm_kv.gamma = random_tensor({6}, rng, 0.5, 1.5, true);
                     auto x = random_tensor({3, 8}, rng, -1, 1, true);
                     auto kv = random_tensor({5, 6}, rng, -1, 1, true);
                     auto w = random_tensor({3, 8}, rng);
                     const auto mask = random_mask(rng, 3, 5);
                     return gradient_error([&] { return weighted_sum(block.attend(x, kv, mask), w); },
                                           {x, kv, block.attn.wq.weight, block.attn.wk.weight,
                                            block.attn.wv.weight, block.attn.wo.weight, block.norm_kv.gamma});
                   }});

  cases.push_back({"multi-head self-attention with key mask", [](Rng& rng) {
                     BlockOptions opts;
                     opts.attention = {8, 2};
                     opts.mlp_ratio = 2;
                     AttentionBlock<double> block(8, 8, opts, rng);
                     auto x = random_tensor({4, 8}, rng, -1, 1, true);
                     auto w = random_tensor({4, 8}, rng);
                     const std::vector<std::uint8_t> valid = {1, 1, 1, 0};
                     const auto mask = broadcast_key_mask(valid, 4);
                     return gradient_error([&] { return weighted_sum(block(x, x, mask, valid), w); },
                                           {x, block.attn.wk.weight, block.attn.wv.bias, block.mlp.fc1.weight,
                                            block.norm_q.beta});
                   }});

  cases.push_back({"mlp", [](Rng& rng) {
                     Mlp<double> mlp(6, 12, rng);
                     auto x = random_tensor({4, 6}, rng, -1, 1, true);
                     auto w = random_tensor({4, 6}, rng);
                     return gradient_error([&] { return weighted_sum(mlp(x), w); },
                                           {x, mlp.fc1.weight, mlp.fc1.bias, mlp.fc2.weight, mlp.fc2.bias});
                   }});

  cases.push_back({"bce + dice loss", [](Rng& rng) {
                     auto logits = random_tensor({8, 8}, rng, -3, 3, true);
                     const auto target = random_target(rng, 64);
                     return gradient_error([&] { return segmentation_loss(logits, target).total; }, {logits});
                   }});

  cases.push_back({"pixel contrastive loss", [](Rng& rng) {
                     auto scores = random_tensor({1, 16}, rng, -3, 3, true);
                     ContrastiveTargets targets{random_target(rng, 16)};
                     return gradient_error([&] { return pixel_contrastive_loss(scores, targets); }, {scores});
                   }});

  cases.push_back({"layer norm", [](Rng& rng) {
                     auto x = random_tensor({3, 6}, rng, -2, 2, true);
                     auto gamma = random_tensor({6}, rng, 0.5, 1.5, true);
                     auto beta = random_tensor({6}, rng, -1, 1, true);
                     auto w = random_tensor({3, 6}, rng);
                     return gradient_error([&] { return weighted_sum(ops::layer_norm(x, gamma, beta), w); },
                                           {x, gamma, beta});
                   }});

  cases.push_back({"softmax", [](Rng& rng) {
                     auto x = random_tensor({3, 5}, rng, -2, 2, true);
                     auto w = random_tensor({3, 5}, rng);
                     return gradient_error([&] { return weighted_sum(ops::softmax(x), w); }, {x});
                   }});

  cases.push_back({"masked aggregation", [](Rng& rng) {
                     auto vision = random_tensor({6, 5}, rng, -1, 1, true);
                     auto bits = random_mask(rng, 3, 6);
                     TensorD mask({3, 6}, std::vector<double>(bits.begin(), bits.end()));
                     Linear<double> proj(5, 4, rng);
                     auto w = random_tensor({3, 4}, rng);
                     return gradient_error([&] { return weighted_sum(proj(masked_token_sum(vision, mask)), w); },
                                           {vision, proj.weight, proj.bias});
                   }});

  cases.push_back({"bilinear resize", [](Rng& rng) {
                     auto x = random_tensor({16, 2}, rng, -1, 1, true);
                     auto w = random_tensor({100, 2}, rng);
                     return gradient_error([&] { return weighted_sum(ops::bilinear_resize(x, 4, 4, 10, 10), w); },
                                           {x});
                   }});

  cases.push_back({"upsample and fuse", [](Rng& rng) {
                     auto decoded = random_tensor({4, 3}, rng, -1, 1, true);
                     auto skip = random_tensor({16, 2}, rng, -1, 1, true);
                     Linear<double> reduce(5, 4, rng);
                     auto w = random_tensor({16, 4}, rng);
                     return gradient_error(
                         [&] { return weighted_sum(upsample_and_fuse(reduce, decoded, {2, 2}, skip, {4, 4}), w); },
                         {decoded, skip, reduce.weight});
                   }});

  return cases;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

}  // namespace

Tensor<double> random_tensor(const Shape& shape, Rng& rng, double lo, double hi, bool requires_grad) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = uniform(rng, lo, hi);
  return Tensor<double>(shape, std::move(v), requires_grad);
}

std::vector<double> loop_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

std::vector<double> loop_attention(const std::vector<double>& q, const std::vector<double>& k,
                                   const std::vector<double>& v, std::size_t nq, std::size_t nk, std::size_t dim,
                                   std::size_t heads, const std::vector<std::uint8_t>& mask,
                                   std::vector<double>* probs) {
  const std::size_t hd = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> out(nq * dim, 0.0);
  if (probs) probs->assign(heads * nq * nk, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < nq; ++i) {
      std::vector<double> s(nk, 0.0);
      double top = -INFINITY;
      for (std::size_t j = 0; j < nk; ++j) {
        if (!mask.empty() && !mask[i * nk + j]) continue;
        double acc = 0;
        for (std::size_t d = 0; d < hd; ++d) acc += q[i * dim + h * hd + d] * k[j * dim + h * hd + d];
        s[j] = acc * scale;
        top = std::max(top, s[j]);
      }
      double z = 0;
      for (std::size_t j = 0; j < nk; ++j) {
        if (!mask.empty() && !mask[i * nk + j]) {
          s[j] = 0;
          continue;
        }
        s[j] = std::exp(s[j] - top);
        z += s[j];
      }
      for (std::size_t j = 0; j < nk; ++j) {
        const double p = s[j] / z;
        if (probs) (*probs)[(h * nq + i) * nk + j] = p;
        for (std::size_t d = 0; d < hd; ++d) out[i * dim + h * hd + d] += p * v[j * dim + h * hd + d];
      }
    }
  return out;
}

std::vector<std::size_t> argsort_top_k(const std::vector<double>& row, std::size_t k) {
  std::vector<std::size_t> order(row.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (row[a] != row[b]) return row[a] > row[b];
    return a < b;
  });
  order.resize(std::min(k, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

double gradient_error(const std::function<Tensor<double>()>& build, std::vector<Tensor<double>> wrt,
                      const std::function<Tensor<double>()>& numeric, double step) {
  for (auto& t : wrt) t.zero_grad();
  build().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& t : wrt) {
    if (t.has_grad())
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    else
      analytic.emplace_back(t.numel(), 0.0);
  }
  const auto& eval = numeric ? numeric : build;
  std::function<double()> f = [&] {
    NoGradGuard guard;
    return eval().item();
  };
  double worst = 0;
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    const auto fd = finite_difference_gradient<double>(f, wrt[i], step);
    const auto cmp =
        compare_gradients<double>(std::span<const double>(analytic[i]), std::span<const double>(fd), kGradientFloor);
    worst = std::max(worst, cmp.relative_error);
  }
  return worst;
}

std::vector<CheckResult> gradient_suite(std::size_t seeds, double tolerance) {
  std::vector<CheckResult> out;
  const auto cases = gradient_cases();
  for (std::size_t c = 0; c < cases.size(); ++c) {
    CheckResult r{cases[c].name, true, 0.0, 0, ""};
    for (std::size_t s = 0; s < seeds; ++s) {
      Rng rng(derive_seed(0x9ad, c, s));
      double err = 0;
      try {
        err = cases[c].run(rng);
      } catch (const std::exception& e) {
        r.pass = false;
        r.detail = std::string("threw: ") + e.what();
        break;
      }
      ++r.cases;
      r.worst = std::max(r.worst, err);
      if (!(err <= tolerance)) r.pass = false;
    }
    if (r.detail.empty()) r.detail = "max rel err " + fmt(r.worst) + " over " + std::to_string(r.cases) + " seeds";
    out.push_back(std::move(r));
  }
  return out;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.image_size = 64;
  cfg.base_channels = 4;
  cfg.model_dim = 8;
  cfg.joint_dim = 8;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.language_layers = 1;
  cfg.decoder_dims = {8, 8, 8};
  cfg.retrieval_ratio = 0.5;
  cfg.contrast_scale_init = 2.0;
  cfg.vocab_size = Vocabulary::scene_grammar().size();
  return cfg;
}

std::vector<CheckResult> end_to_end_probes(double tolerance) {
  std::vector<CheckResult> out;
  const auto vocab = Vocabulary::scene_grammar();
  const auto scene = generate_scene(SceneGrammar{}, 11, 64, 64);
  const auto words = vocab.tokenize(scene.sample.expression);
  const std::vector<std::string> prefixes = {"enc.vision", "enc.language", "enc.fusion", "veg.phi",
                                             "veg.refine", "veg.share", "dec.stage", "dec.head"};

  for (auto fusion : {FusionMode::none, FusionMode::late, FusionMode::early})
    for (auto kv : {KeyValueSource::ve, KeyValueSource::advanced_le, KeyValueSource::vanilla_le}) {
      auto cfg = tiny_config();
      cfg.fusion = fusion;
      cfg.kv_source = kv;
      CheckResult r{"end-to-end " + to_string(fusion) + "/" + to_string(kv), true, 0.0, 0, ""};
      try {
        VipaModel<double> model(cfg, 5);
        ForwardOptions<double> opts;
        opts.mode = RetrievalMode::train;
        opts.gumbel_seed = 3;
        opts.target = scene.sample.mask;

        RetrievalOverrides<double> st, soft;
        {
          NoGradGuard guard;
          const auto first = model.forward(scene.sample.image, words, opts);
          st.gumbel = first.veg.retrieval.gumbel.detach();
          st.frozen_mask = first.veg.retrieval.hard_mask;
          soft = st;
          soft.soft_forward = true;
          soft.anchor = first.veg.retrieval.perturbed.detach();
        }
        auto with = [&](const RetrievalOverrides<double>* o) {
          return [&, o] {
            auto local = opts;
            local.overrides = o;
            return model.forward(scene.sample.image, words, local).loss;
          };
        };

        // Probes: the smallest parameter under each prefix plus the scalars.
        std::vector<TensorD> wrt;
        std::vector<std::string> names;
        for (const auto& prefix : prefixes) {
          const TensorD* best = nullptr;
          std::string best_name;
          for (const auto& e : model.parameters().entries())
            if (e.name.rfind(prefix, 0) == 0 && (!best || e.tensor.numel() < best->numel())) {
              best = &e.tensor;
              best_name = e.name;
            }
          if (best) {
            wrt.push_back(*best);
            names.push_back(best_name);
          }
        }
        for (const auto* scalar : {"veg.log_tau", "veg.log_contrast_scale"})
          if (const auto* t = model.parameters().find(scalar)) {
            wrt.push_back(*t);
            names.push_back(scalar);
          }

        double base_gap = 0;
        {
          NoGradGuard guard;
          base_gap = std::abs(with(&st)().item() - with(&soft)().item());
        }
        model.parameters().zero_grad();
        for (std::size_t i = 0; i < wrt.size(); ++i) {
          const double err = gradient_error(with(&st), {wrt[i]}, with(&soft));
          ++r.cases;
          if (err > r.worst) {
            r.worst = err;
            r.detail = names[i];
          }
        }
        r.pass = r.worst <= tolerance && base_gap == 0.0;
        r.detail = "max rel err " + fmt(r.worst) + " (" + r.detail + "), " + std::to_string(r.cases) + " probes";
        if (base_gap != 0.0) r.detail += ", surrogate value gap " + fmt(base_gap);
      } catch (const std::exception& e) {
        r.pass = false;
        r.detail = std::string("threw: ") + e.what();
      }
      out.push_back(std::move(r));
    }
  return out;
}

CheckResult retrieval_invariants(std::size_t cases) {
  CheckResult r{"retrieval invariants", true, 0.0, 0, ""};
  auto fail = [&](std::size_t c, const std::string& why) {
    if (r.pass) r.detail = "case " + std::to_string(c) + ": " + why;
    r.pass = false;
  };
  for (std::size_t c = 0; c < cases; ++c) {
    Rng rng(derive_seed(0x7e7, c));
    const std::size_t rows = pick(rng, 1, 6), n = pick(rng, 1, 40);
    const std::size_t percent = (c % 10 == 0) ? 100 : pick(rng, 1, 100);
    const double ratio = static_cast<double>(percent) / 100.0;
    const std::size_t keep = std::max<std::size_t>(1, percent * n / 100);
    const bool train = c % 2 == 1;

    std::vector<double> s(rows * n);
    const bool quantize = uniform_open01(rng) < 0.3;
    for (auto& v : s) v = quantize ? 0.5 * static_cast<double>(pick(rng, 0, 2)) - 0.5 : uniform(rng, -1, 1);
    auto cue = random_bits(rng, rows, 0.7);
    cue[0] = 1;
    const double tau = train ? uniform(rng, 0.3, 2.0) : 1.0;
    TensorD scores({rows, n}, s);
    RetrievalOverrides<double> o;
    if (train) o.gumbel = sample_gumbel<double>({rows, n}, rng);

    RetrievalResult<double> res;
    try {
      res = retrieve_informative_tokens(scores, cue, ratio, TensorD::scalar(tau),
                                        train ? RetrievalMode::train : RetrievalMode::eval, nullptr, &o);
    } catch (const std::exception& e) {
      fail(c, std::string("threw: ") + e.what());
      continue;
    }
    ++r.cases;
    if (res.keep_count != keep) fail(c, "N_p " + std::to_string(res.keep_count) + " != " + std::to_string(keep));

    for (std::size_t i = 0; i < rows; ++i) {
      std::vector<double> row(s.begin() + i * n, s.begin() + (i + 1) * n);
      if (train) {
        // softmax((s + g) / tau), written out
        const auto g = o.gumbel->values();
        double top = -INFINITY;
        for (std::size_t j = 0; j < n; ++j) top = std::max(top, (row[j] + g[i * n + j]) / tau);
        double z = 0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp((row[j] + g[i * n + j]) / tau - top);
        for (std::size_t j = 0; j < n; ++j) row[j] = std::exp((row[j] + g[i * n + j]) / tau - top) / z;
      }
      const auto expect = cue[i] ? argsort_top_k(row, keep) : std::vector<std::size_t>{};
      if (res.indices[i] != expect) fail(c, "row " + std::to_string(i) + " indices differ from oracle");
      std::size_t ones = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const auto h = res.hard_mask[i * n + j];
        ones += h;
        if (res.mask.values()[i * n + j] != static_cast<double>(h)) fail(c, "mask tensor differs from hard mask");
      }
      if (ones != (cue[i] ? keep : 0)) fail(c, "row " + std::to_string(i) + " has " + std::to_string(ones) + " ones");
      if (percent == 100 && cue[i] && ones != n) fail(c, "ratio 1 did not keep every token");
    }
  }
  if (r.pass) r.detail = std::to_string(r.cases) + " cases match the argsort oracle";
  return r;
}

CheckResult attention_leakage(std::size_t calls) {
  CheckResult r{"attention leakage", true, 0.0, 0, ""};
  double worst_sum = 0, worst_oracle = 0;
  double leaked = 0;
  for (std::size_t c = 0; c < calls; ++c) {
    Rng rng(derive_seed(0xa77, c));
    const std::size_t heads = std::size_t{1} << pick(rng, 0, 2);
    const std::size_t dim = heads * pick(rng, 1, 4);
    const std::size_t nq = pick(rng, 1, 8), nk = pick(rng, 1, 12);
    auto q = random_tensor({nq, dim}, rng, -3, 3);
    auto k = random_tensor({nk, dim}, rng, -3, 3);
    auto v = random_tensor({nk, dim}, rng, -3, 3);
    const auto mask = random_mask(rng, nq, nk);
    std::vector<double> bias(nq * nk);
    for (std::size_t i = 0; i < bias.size(); ++i) bias[i] = mask[i] ? 0.0 : ops::kMaskedScore;

    ops::AttentionProbs<double> probs;
    const auto out = ops::attention(q, k, v, heads, bias, &probs);
    std::vector<double> oracle_probs;
    const auto expect = loop_attention({q.values().begin(), q.values().end()}, {k.values().begin(), k.values().end()},
                                       {v.values().begin(), v.values().end()}, nq, nk, dim, heads, mask, &oracle_probs);
    ++r.cases;
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < nq; ++i) {
        double total = 0;
        for (std::size_t j = 0; j < nk; ++j) {
          const double p = probs.at(h, i, j);
          total += p;
          if (!mask[i * nk + j]) leaked = std::max(leaked, std::abs(p));
        }
        worst_sum = std::max(worst_sum, std::abs(total - 1.0));
      }
    for (std::size_t i = 0; i < expect.size(); ++i)
      worst_oracle = std::max(worst_oracle, std::abs(expect[i] - out.values()[i]));
  }
  r.worst = std::max(worst_sum, leaked);
  r.pass = leaked == 0.0 && worst_sum <= 1e-9 && worst_oracle <= 1e-10;
  r.detail = "masked weight max " + fmt(leaked) + ", |row sum - 1| max " + fmt(worst_sum) + ", vs loop oracle " +
             fmt(worst_oracle);
  return r;
}

CheckResult metric_oracle(std::size_t batches) {
  CheckResult r{"metric oracle", true, 0.0, 0, ""};
  auto fail = [&](std::size_t b, const std::string& why) {
    if (r.pass) r.detail = "batch " + std::to_string(b) + ": " + why;
    r.pass = false;
  };
  for (std::size_t b = 0; b < batches; ++b) {
    Rng rng(derive_seed(0x3e7, b));
    const std::size_t n = pick(rng, 1, 20), side = pick(rng, 4, 16), px = side * side;
    std::vector<std::vector<std::uint8_t>> preds, gts;
    for (std::size_t i = 0; i < n; ++i) {
      const double pp = (rng() % 5 == 0) ? 0.0 : uniform_open01(rng);
      const double pg = (rng() % 5 == 0) ? 0.0 : uniform_open01(rng);
      preds.push_back(random_bits(rng, px, pp));
      gts.push_back(random_bits(rng, px, pg));
    }

    // Oracle: plain pixel counting.
    std::size_t total_i = 0, total_u = 0;
    std::vector<double> ious;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t inter = 0, uni = 0;
      for (std::size_t p = 0; p < px; ++p) {
        inter += (preds[i][p] && gts[i][p]) ? 1 : 0;
        uni += (preds[i][p] || gts[i][p]) ? 1 : 0;
      }
      total_i += inter;
      total_u += uni;
      ious.push_back(uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni));
    }
    const double o_oiou = total_u == 0 ? 1.0 : static_cast<double>(total_i) / static_cast<double>(total_u);
    auto sorted = ious;
    std::sort(sorted.begin(), sorted.end());
    double acc = 0;
    for (double v : sorted) acc += v;
    const double o_miou = acc / static_cast<double>(n);
    auto o_prec = [&](double t) {
      std::size_t hits = 0;
      for (double v : ious) hits += v > t ? 1 : 0;
      return static_cast<double>(hits) / static_cast<double>(n);
    };

    EvalAccumulator whole;
    for (std::size_t i = 0; i < n; ++i) whole.add(preds[i], gts[i]);
    ++r.cases;
    if (oiou(whole) != o_oiou) fail(b, "oIoU differs");
    if (miou(whole) != o_miou) fail(b, "mIoU differs");
    if (precision_at(whole, 0.5) != o_prec(0.5) || precision_at(whole, 0.7) != o_prec(0.7))
      fail(b, "precision differs");

    // Split into chunks and merge in a shuffled order.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    std::vector<EvalAccumulator> parts(pick(rng, 1, 4));
    for (std::size_t i = 0; i < n; ++i) parts[rng() % parts.size()].add(preds[order[i]], gts[order[i]]);
    EvalAccumulator merged;
    for (std::size_t i = parts.size(); i-- > 0;)
      if (parts[i].size() > 0) merged.merge(parts[i]);
    if (oiou(merged) != o_oiou || miou(merged) != o_miou || precision_at(merged, 0.5) != o_prec(0.5) ||
        precision_at(merged, 0.7) != o_prec(0.7))
      fail(b, "merged accumulator differs");
  }
  if (r.pass) r.detail = std::to_string(r.cases) + " batches exact, merge order invariant";
  return r;
}

CheckResult contrastive_toy(std::size_t steps) {
  CheckResult r{"contrastive toy", false, 0.0, steps, ""};
  ModelConfig cfg = tiny_config();
  cfg.base_channels = 2;  // stage-4 width 16: the 16 tokens are in general position
  cfg.model_dim = 8;
  cfg.joint_dim = 8;
  Rng rng(derive_seed(0xc0, 1));
  VisualExpressionGenerator<double> veg(cfg, rng);
  const auto vision = random_tensor({16, cfg.stage_channels(3)}, rng);
  const auto word = random_tensor({1, cfg.model_dim}, rng);
  ContrastiveTargets targets;
  targets.positive = {1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 1, 0, 0, 1, 1};

  ParameterList<double> params;
  veg.vision_proj.collect(params, "phi_v");
  veg.linguistic_proj.collect(params, "phi_l");
  params.add("log_contrast_scale", veg.log_contrast_scale);
  AdamWConfig ocfg;
  ocfg.weight_decay = 0;
  AdamW<double> optim(params, ocfg);

  auto logits = [&] {
    const auto rel = veg.compute_relevance(vision, word);
    return ops::mul_scalar(rel.global_row(), veg.contrast_scale());
  };
  try {
    for (std::size_t s = 0; s < steps; ++s) {
      params.zero_grad();
      pixel_contrastive_loss(logits(), targets).backward();
      optim.step(0.02);
    }
    NoGradGuard guard;
    const auto z = logits();
    double pos = 0, neg = 0;
    std::size_t np = 0, nn = 0;
    for (std::size_t i = 0; i < 16; ++i) {
      const double sig = 1.0 / (1.0 + std::exp(-z.values()[i]));
      if (targets.positive[i]) {
        pos += sig;
        ++np;
      } else {
        neg += sig;
        ++nn;
      }
    }
    pos /= static_cast<double>(np);
    neg /= static_cast<double>(nn);
    r.pass = pos >= 0.9 && neg <= 0.1;
    r.worst = std::max(0.9 - pos, neg - 0.1);
    r.detail = "mean sigma on positives " + std::to_string(pos) + ", on negatives " + std::to_string(neg);
  } catch (const std::exception& e) {
    r.detail = std::string("threw: ") + e.what();
  }
  return r;
}

}  // namespace vipa::testkit
