#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "kit.hpp"
#include "vipa/commands.hpp"

using namespace vipa;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("vipa_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

RunConfig tiny_run(const fs::path& dir) {
  RunConfig cfg;
  cfg.model = testkit::tiny_config();
  cfg.precision = PrecisionFlag::f64;
  cfg.train.epochs = 2;
  cfg.train.batch_size = 4;
  cfg.train.lr = 3e-3;
  cfg.data = dir.string();
  cfg.checkpoint = (dir / "model.ckpt").string();
  cfg.log = (dir / "train_log.csv").string();
  return cfg;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("gen writes one manifest line per sample, deterministically") {
    const auto a = scratch("gen_a"), b = scratch("gen_b");
    GenOptions opts;
    opts.count = 20;
    opts.seed = 3;
    opts.out = a;
    const auto entries = cmd_gen(opts);
    CHECK(entries.size() == 20);
    std::size_t val = 0;
    for (const auto& e : entries) val += e.split == "val";
    CHECK(val == 4);
    CHECK(line_count(slurp(a / kManifestName)) == 20);
    opts.out = b;
    cmd_gen(opts);
    CHECK(slurp(a / kManifestName) == slurp(b / kManifestName));
    CHECK(slurp(a / entries[7].path / "image.ppm") == slurp(b / entries[7].path / "image.ppm"));

    opts.count = 0;
    CHECK_THROWS(cmd_gen(opts));
    opts.count = 4;
    opts.val = 5;
    CHECK_THROWS(cmd_gen(opts));
    fs::remove_all(a);
    fs::remove_all(b);
  }

  TEST_CASE("train, eval, infer and dump-attention on a tiny run") {
    const auto dir = scratch("run");
    GenOptions gen;
    gen.count = 12;
    gen.val = 4;
    gen.out = dir;
    cmd_gen(gen);

    TrainOptions train;
    train.config = tiny_run(dir);
    const auto summary = cmd_train(train);
    CHECK(summary.epochs_run == 2);
    CHECK(summary.steps == 4);
    CHECK(fs::exists(dir / "model.ckpt"));
    CHECK(fs::exists(config_sidecar(dir / "model.ckpt")));
    CHECK(line_count(slurp(dir / "train_log.csv")) == 5);

    EvalOptions eval;
    eval.config = train.config;
    const auto acc = cmd_eval(eval);
    CHECK(acc.size() == 4);
    const double m = miou(acc);
    CHECK(m >= 0.0);
    CHECK(m <= 1.0);

    const auto entries = read_manifest(dir / kManifestName);
    InferOptions infer;
    infer.config = train.config;
    infer.image = dir / entries[0].path / "image.ppm";
    infer.expression = "the red circle";
    infer.out = dir / "mask.pgm";
    cmd_infer(infer);
    std::size_t h = 0, w = 0;
    const auto mask = parse_pgm(slurp(infer.out), h, w);
    CHECK(h == 64);
    CHECK(w == 64);
    for (auto v : mask) CHECK((v == 0 || v == 255));
    infer.expression = "the purple unicorn";  // unknown words map to <unk>
    CHECK_NOTHROW(cmd_infer(infer));
    infer.image = dir / "missing.ppm";
    CHECK_THROWS(cmd_infer(infer));

    DumpOptions dump;
    dump.config = train.config;
    dump.sample = dir / entries[0].path;
    dump.out = dir / "dump";
    const auto rep = cmd_dump_attention(dump);
    CHECK(rep.tokens == 4);
    CHECK(rep.keep == retrieval_count(train.config.model.retrieval_ratio, 4));
    CHECK(rep.max_mask_row_error == 0.0);
    CHECK(rep.max_attention_row_error <= 1e-6);
    for (const auto& f : rep.files) CHECK(fs::exists(f));
    std::size_t dh = 0, dw = 0;
    parse_pgm(slurp(dir / "dump" / "relevance_row0.pgm"), dh, dw);
    CHECK(dh == 2);
    CHECK(dw == 2);
    fs::remove_all(dir);
  }

  TEST_CASE("ablation harness writes a well-formed CSV and records failures") {
    const auto dir = scratch("ablate");
    AblateOptions opts;
    opts.config = tiny_run(dir);
    opts.kv = {KeyValueSource::ve, KeyValueSource::vanilla_le};
    opts.ratios = {0.1, 0.3, 0.8};
    opts.toggles = {"step2"};
    opts.out = dir / "ablation.csv";
    opts.runner = [&](const AblationCell& c, const RunConfig& cfg) {
      CHECK(cfg.model.kv_source == c.kv);
      CHECK(cfg.model.retrieval_ratio == c.ratio);
      if (c.kv == KeyValueSource::vanilla_le && c.ratio == 0.8) throw std::runtime_error("diverged, \"badly\"");
      AblationResult r;
      r.ok = true;
      r.oiou = c.ratio;
      r.miou = c.ratio / 2;
      r.p50 = 0.25;
      r.p70 = 0.125;
      return r;
    };
    const auto results = cmd_ablate(opts);
    REQUIRE(results.size() == 7);
    CHECK(results.back().cell.label == "no_step2");
    CHECK(!results.back().cell.step2);

    const auto back = parse_ablation_csv(slurp(opts.out));
    REQUIRE(back.size() == 7);
    std::size_t failed = 0;
    for (std::size_t i = 0; i < back.size(); ++i) {
      CHECK(back[i].cell.kv == results[i].cell.kv);
      CHECK(back[i].cell.ratio == results[i].cell.ratio);
      CHECK(back[i].ok == results[i].ok);
      if (!back[i].ok) {
        ++failed;
        CHECK(back[i].error == "diverged, \"badly\"");
      } else {
        CHECK(back[i].oiou == results[i].oiou);
      }
    }
    CHECK(failed == 1);
    CHECK(ablation_summary(results).find("not all sources") != std::string::npos);
    CHECK_THROWS(parse_ablation_csv("label,kv\n"));

    opts.toggles = {"bogus"};
    CHECK_THROWS(ablation_cells(opts));
    fs::remove_all(dir);
  }

  TEST_CASE("key-value sources give decoder inputs of equal shape") {
    const auto scene = generate_scene(SceneGrammar{}, 9, 64, 64);
    const auto ids = Vocabulary::scene_grammar().tokenize(scene.sample.expression);
    std::optional<Shape> shape;
    for (auto src : {KeyValueSource::ve, KeyValueSource::advanced_le, KeyValueSource::vanilla_le}) {
      auto cfg = testkit::tiny_config();
      cfg.kv_source = src;
      VipaModel<double> model(cfg, 1);
      const auto r = model.forward(scene.sample.image, ids);
      if (!shape) shape = r.kv.tokens.shape();
      CHECK(r.kv.tokens.shape() == *shape);
    }
  }
}
