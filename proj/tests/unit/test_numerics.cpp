#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "kit.hpp"
#include "vipa/numerics/checkpoint.hpp"
#include "vipa/numerics/gradcheck.hpp"
#include "vipa/numerics/kernels.hpp"
#include "vipa/numerics/layers.hpp"
#include "vipa/numerics/ops.hpp"
#include "vipa/numerics/optimizer.hpp"
#include "vipa/numerics/random.hpp"

using namespace vipa;
using testkit::random_tensor;
using TD = Tensor<double>;

namespace {

std::vector<double> vec(const TD& t) { return {t.values().begin(), t.values().end()}; }

double gelu_ref(double v) { return 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v))); }

}  // namespace

TEST_SUITE("numerics") {
  TEST_CASE("matmul identity and scalar cases") {
    TD eye({2, 2}, {1, 0, 0, 1});
    TD col({2, 1}, {3, 4});
    CHECK(vec(ops::matmul(eye, col)) == std::vector<double>{3, 4});
    CHECK(ops::matmul(TD({1, 1}, {2}), TD({1, 1}, {5})).item() == 10);
  }

  TEST_CASE("matmul matches the triple loop") {
    Rng rng(1);
    for (int t = 0; t < 5; ++t) {
      auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
      const auto got = vec(ops::matmul(a, b));
      const auto want = testkit::loop_matmul(vec(a), vec(b), 3, 4, 2);
      for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) <= 1e-12);
    }
  }

  TEST_CASE("matmul rejects mismatched inner dimensions") {
    CHECK_THROWS_AS(ops::matmul(TD::zeros({2, 3}), TD::zeros({2, 3})), DimensionError);
  }

  TEST_CASE("softmax examples") {
    auto s = ops::softmax(TD({1, 2}, {0, 0}));
    CHECK(s.at(0) == doctest::Approx(0.5));
    CHECK(s.at(1) == doctest::Approx(0.5));
    auto big = ops::softmax(TD({1, 2}, {1000, 0}));
    CHECK(std::isfinite(big.at(0)));
    CHECK(big.at(0) == doctest::Approx(1.0));
    CHECK(big.at(1) == doctest::Approx(0.0));

    Rng rng(2);
    auto x = random_tensor({4, 7}, rng, -5, 5);
    const auto a = ops::softmax(x), b = ops::softmax(ops::add_scalar(x, 123.0));
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.at(i) - b.at(i)) <= 1e-9);
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0;
      for (std::size_t c = 0; c < 7; ++c) total += a.at(r, c);
      CHECK(std::abs(total - 1) <= 1e-9);
    }
  }

  TEST_CASE("gumbel transform and Monte-Carlo mean") {
    CHECK(gumbel_from_uniform(std::exp(-1.0)) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(gumbel_from_uniform(std::exp(-std::exp(1.0))) == doctest::Approx(-1.0).epsilon(1e-12));
    const auto g = sample_gumbel<double>({100000}, std::uint64_t{42});
    double mean = 0;
    for (double v : g.values()) mean += v;
    mean /= 1e5;
    CHECK(std::abs(mean - 0.5772156649) <= 0.02);
    CHECK(vec(sample_gumbel<double>({16}, std::uint64_t{9})) == vec(sample_gumbel<double>({16}, std::uint64_t{9})));
  }

  TEST_CASE("attention with identity projections") {
    Rng rng(3);
    AttentionConfig cfg{4, 2};
    MultiHeadAttention<double> mha(4, 4, cfg, rng);
    for (auto* l : {&mha.wq, &mha.wk, &mha.wv, &mha.wo}) identity_fill(*l);

    TD one({1, 4}, {0.3, -0.2, 0.7, 1.1});
    CHECK(vec(mha(one, one)) == vec(one));

    auto q = random_tensor({2, 4}, rng);
    auto kv = random_tensor({3, 4}, rng);
    const AttentionMask mask = {0, 1, 0, 0, 1, 0};
    const auto out = mha(q, kv, mask);
    for (std::size_t c = 0; c < 4; ++c) {
      CHECK(out.at(0, c) == doctest::Approx(kv.at(1, c)).epsilon(1e-12));
      CHECK(out.at(1, c) == doctest::Approx(kv.at(1, c)).epsilon(1e-12));
    }
  }

  TEST_CASE("unmasked attention matches the loop oracle") {
    Rng rng(4);
    AttentionConfig cfg{6, 2};
    MultiHeadAttention<double> mha(6, 6, cfg, rng);
    for (auto* l : {&mha.wq, &mha.wk, &mha.wv, &mha.wo}) identity_fill(*l);
    auto x = random_tensor({3, 6}, rng, -2, 2);
    const auto got = vec(mha(x, x));
    const auto want = testkit::loop_attention(vec(x), vec(x), vec(x), 3, 3, 6, 2, {});
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) <= 1e-10);
  }

  TEST_CASE("all-zero mask row is rejected") {
    Rng rng(5);
    MultiHeadAttention<double> mha(4, 4, AttentionConfig{4, 1}, rng);
    auto x = random_tensor({2, 4}, rng);
    CHECK_THROWS_AS(mha(x, x, AttentionMask{1, 0, 0, 0}), DegenerateMaskError);
  }

  TEST_CASE("attention config must divide") {
    CHECK_THROWS(AttentionConfig({6, 4}).validate());
  }

  TEST_CASE("mlp zero, passthrough and reference forward") {
    Rng rng(6);
    Mlp<double> mlp(3, 6, rng);
    auto x = random_tensor({2, 3}, rng);

    Mlp<double> zero = mlp;
    zero.fc1 = Linear<double>(3, 6, rng);
    zero.fc2 = Linear<double>(6, 3, rng);
    zero_fill(zero.fc1);
    zero_fill(zero.fc2);
    const auto zeroed = zero(x);
    for (double v : zeroed.values()) CHECK(v == 0.0);

    // relu(x) - relu(-x) == x
    Mlp<double> pass(2, 4, rng, Activation::relu);
    pass.fc1.weight = TD({4, 2}, {1, 0, 0, 1, -1, 0, 0, -1});
    pass.fc2.weight = TD({2, 4}, {1, 0, -1, 0, 0, 1, 0, -1});
    TD y({2, 2}, {0.5, -1.5, 2.0, 0.25});
    CHECK(vec(pass(y)) == vec(y));

    const auto got = vec(mlp(x));
    const auto w1 = vec(mlp.fc1.weight), w2 = vec(mlp.fc2.weight);
    for (std::size_t r = 0; r < 2; ++r) {
      std::vector<double> h(6);
      for (std::size_t j = 0; j < 6; ++j) {
        double acc = mlp.fc1.bias.at(j);
        for (std::size_t k = 0; k < 3; ++k) acc += w1[j * 3 + k] * x.at(r, k);
        h[j] = gelu_ref(acc);
      }
      for (std::size_t o = 0; o < 3; ++o) {
        double acc = mlp.fc2.bias.at(o);
        for (std::size_t j = 0; j < 6; ++j) acc += w2[o * 6 + j] * h[j];
        CHECK(std::abs(got[r * 3 + o] - acc) <= 1e-12);
      }
    }
  }

  TEST_CASE("backward basics and misuse") {
    auto x = TD::full({2, 3}, 1.5, true);
    ops::sum(x).backward();
    for (double g : x.grad()) CHECK(g == 1.0);

    auto y = TD::scalar(3.0, true);
    auto loss = ops::sum(ops::mul(y, y));
    loss.backward();
    CHECK(y.grad()[0] == doctest::Approx(6.0));
    CHECK_THROWS_AS(loss.backward(), GradientError);

    auto z = TD::full({2}, 1.0, true);
    CHECK_THROWS_AS(ops::mul(z, z).backward(), GradientError);
    CHECK_THROWS_AS(TD::scalar(1.0).backward(), GradientError);
  }

  TEST_CASE("non-finite forward values are errors") {
    CHECK_THROWS_AS(ops::log(TD({1}, {-1.0})), NumericError);
    CHECK_THROWS_AS(ops::exp(TD({1}, {1e6})), NumericError);
  }

  TEST_CASE("finite-difference examples") {
    auto x = TD::scalar(3.0);
    std::function<double(const TD&)> sq = [](const TD& t) { return t.item() * t.item(); };
    CHECK(std::abs(finite_difference_gradient<double>(sq, x, 1e-6).item() - 6.0) <= 1e-6);

    Rng rng(7);
    auto v = random_tensor({2, 4}, rng);
    std::function<double(const TD&)> constant = [](const TD&) { return 2.5; };
    const auto flat = finite_difference_gradient<double>(constant, v, 1e-6);
    for (double g : flat.values()) CHECK(g == 0.0);
    std::function<double(const TD&)> softsum = [](const TD& t) { return ops::sum(ops::softmax(t)).item(); };
    const auto level = finite_difference_gradient<double>(softsum, v, 1e-6);
    for (double g : level.values()) CHECK(std::abs(g) <= 1e-8);
  }

  TEST_CASE("gradient suite: analytic vs finite differences") {
    for (const auto& r : testkit::gradient_suite(10, 1e-5)) {
      INFO(r.name << ": " << r.detail);
      CHECK(r.pass);
    }
  }

  TEST_CASE("seeded forward and backward are bit-identical") {
    auto run = [] {
      Rng rng(8);
      AttentionBlock<double> block(8, 8, BlockOptions{{8, 2}, 2.0}, rng);
      auto x = random_tensor({5, 8}, rng, -1, 1, true);
      auto out = ops::sum(block(x, x));
      out.backward();
      auto g = std::vector<double>(x.grad().begin(), x.grad().end());
      g.push_back(out.item());
      return g;
    };
    CHECK(run() == run());
  }

  TEST_CASE("checkpoint round-trip and corruption") {
    Rng rng(9);
    Linear<float> layer(3, 2, rng);
    ParameterList<float> params;
    layer.collect(params, "fc");
    const auto path = std::filesystem::temp_directory_path() / "vipa_unit_ckpt.bin";
    write_checkpoint(path, snapshot_parameters(params));

    Linear<float> other(3, 2, rng);
    ParameterList<float> params2;
    other.collect(params2, "fc");
    restore_parameters(params2, read_checkpoint(path));
    CHECK(std::vector<float>(other.weight.values().begin(), other.weight.values().end()) ==
          std::vector<float>(layer.weight.values().begin(), layer.weight.values().end()));

    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    CHECK(bytes.substr(0, 5) == "VIPA1");
    {
      std::ofstream out(path, std::ios::binary | std::ios::trunc);
      out << bytes.substr(0, bytes.size() - 3);
    }
    CHECK_THROWS_AS(read_checkpoint(path), CheckpointError);

    ParameterList<float> wrong;
    Linear<float> small(2, 2, rng);
    small.collect(wrong, "fc");
    {
      std::ofstream out(path, std::ios::binary | std::ios::trunc);
      out << bytes;
    }
    CHECK_THROWS_AS(restore_parameters(wrong, read_checkpoint(path)), CheckpointError);
    std::filesystem::remove(path);
  }

  TEST_CASE("parameters register once") {
    Rng rng(10);
    Linear<double> layer(2, 2, rng);
    ParameterList<double> params;
    layer.collect(params, "a");
    CHECK_THROWS(layer.collect(params, "b"));
  }

  TEST_CASE("optimizer with zero learning rate leaves weights unchanged") {
    Rng rng(11);
    Linear<double> layer(3, 3, rng);
    ParameterList<double> params;
    layer.collect(params, "fc");
    const auto before = vec(layer.weight);
    AdamW<double> opt(params);
    ops::sum(layer(random_tensor({2, 3}, rng))).backward();
    opt.step(0.0);
    CHECK(vec(layer.weight) == before);
  }

  TEST_CASE("polynomial decay") {
    CHECK(polynomial_decay(1e-3, 0, 100) == doctest::Approx(1e-3));
    CHECK(polynomial_decay(1e-3, 50, 100, 1.0) == doctest::Approx(5e-4));
    CHECK(polynomial_decay(1e-3, 100, 100) == 0.0);
    CHECK(polynomial_decay(1e-3, 75, 100, 2.0) == doctest::Approx(1e-3 * 0.0625));
  }
}

TEST_SUITE("kernels") {
  TEST_CASE("serial and parallel gemm are bit-identical") {
    Rng rng(12);
    for (bool ta : {false, true})
      for (bool tb : {false, true}) {
        const std::size_t m = 37, n = 29, k = 53;
        auto a = random_tensor({m * k}, rng), b = random_tensor({k * n}, rng);
        std::vector<double> c1(m * n, 0.5), c2(m * n, 0.5);
        kernels::GemmArgs args{ta, tb, true, m, n, k};
        kernels::serial::gemm(args, a.values().data(), b.values().data(), c1.data());
        kernels::parallel::gemm(args, a.values().data(), b.values().data(), c2.data());
        CHECK(c1 == c2);
      }
  }

  TEST_CASE("serial and parallel attention are bit-identical") {
    Rng rng(13);
    const std::size_t nq = 20, nk = 17, dim = 12, heads = 3;
    auto q = random_tensor({nq, dim}, rng), k = random_tensor({nk, dim}, rng), v = random_tensor({nk, dim}, rng);
    std::vector<double> bias(nq * nk, 0.0);
    for (std::size_t i = 0; i < bias.size(); i += 3) bias[i] = ops::kMaskedScore;
    for (std::size_t i = 0; i < nq; ++i) bias[i * nk + 1] = 0.0;
    kernels::AttentionArgs args{nq, nk, dim, heads, 0.5};
    std::vector<double> o1(nq * dim), o2(nq * dim), p1(heads * nq * nk), p2(heads * nq * nk);
    kernels::serial::attention_forward(args, q.values().data(), k.values().data(), v.values().data(), bias.data(),
                                       p1.data(), o1.data());
    kernels::parallel::attention_forward(args, q.values().data(), k.values().data(), v.values().data(), bias.data(),
                                         p2.data(), o2.data());
    CHECK(o1 == o2);
    CHECK(p1 == p2);

    auto go = random_tensor({nq, dim}, rng);
    std::vector<double> dq1(nq * dim), dk1(nk * dim), dv1(nk * dim), dq2(nq * dim), dk2(nk * dim), dv2(nk * dim);
    kernels::serial::attention_backward(args, q.values().data(), k.values().data(), v.values().data(), p1.data(),
                                        go.values().data(), dq1.data(), dk1.data(), dv1.data());
    kernels::parallel::attention_backward(args, q.values().data(), k.values().data(), v.values().data(), p2.data(),
                                          go.values().data(), dq2.data(), dk2.data(), dv2.data());
    CHECK(dq1 == dq2);
    CHECK(dk1 == dk2);
    CHECK(dv1 == dv2);
  }
}
