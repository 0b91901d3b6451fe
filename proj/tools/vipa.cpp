#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "vipa/commands.hpp"
#include "vipa/numerics/checkpoint.hpp"

using namespace vipa;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

// Flags shared by commands that build a RunConfig: a config file, repeated
// key=value overrides, and a few common shortcuts.
struct ConfigFlags {
  std::string file;
  std::vector<std::string> sets;
  std::string data, checkpoint, log, precision;
  std::optional<double> lr;
  std::optional<std::size_t> epochs, batch, threads;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* app, bool training) {
    app->add_option("--config", file, "key = value config file");
    app->add_option("--set", sets, "override one config key (key=value), repeatable");
    app->add_option("--data", data, "dataset directory containing manifest.tsv");
    app->add_option("--checkpoint", checkpoint, "checkpoint path");
    app->add_option("--precision", precision, "f32 or f64");
    app->add_option("--seed", seed, "root seed");
    if (training) {
      app->add_option("--log", log, "training log CSV");
      app->add_option("--lr", lr, "initial learning rate");
      app->add_option("--epochs", epochs, "training epochs");
      app->add_option("--batch-size", batch, "minibatch size");
      app->add_option("--threads", threads, "gradient worker threads");
    }
  }

  RunConfig resolve(bool use_sidecar) const {
    RunConfig cfg;
    if (!file.empty()) {
      cfg = load_run_config(file);
    } else if (use_sidecar && !checkpoint.empty() && std::filesystem::exists(config_sidecar(checkpoint))) {
      cfg = load_run_config(config_sidecar(checkpoint));
    }
    apply_seed_env(cfg);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!data.empty()) cfg.data = data;
    if (!checkpoint.empty()) cfg.checkpoint = checkpoint;
    if (!log.empty()) cfg.log = log;
    if (!precision.empty()) cfg.set("precision", precision);
    if (lr) cfg.train.lr = *lr;
    if (epochs) cfg.train.epochs = *epochs;
    if (batch) cfg.set("batch_size", std::to_string(*batch));
    if (threads) cfg.set("threads", std::to_string(*threads));
    if (seed) cfg.train.seed = *seed;
    cfg.validate();
    return cfg;
  }
};

void print_report(const EvalAccumulator& acc, const std::string& csv_path) {
  const auto rows = metric_rows(acc);
  std::cout << format_table(rows);
  if (!csv_path.empty()) {
    std::ofstream out(csv_path);
    if (!out) throw std::runtime_error("cannot write " + csv_path);
    out << format_csv(rows);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Referring segmentation with retrieved visual expressions"};
  app.require_subcommand(1);

  GenOptions gen;
  std::string gen_out;
  auto* gen_cmd = app.add_subcommand("gen", "generate a synthetic dataset");
  gen_cmd->add_option("--n", gen.count, "number of samples (manifest lines)")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--val", gen.val, "samples in the held-out-combination split (default n/5)");
  gen_cmd->add_option("--size", gen.size, "image side in pixels (multiple of 16)")
      ->check(CLI::PositiveNumber & CLI::Validator(
                                        [](std::string& s) {
                                          return std::stoul(s) % 16 == 0 ? std::string() : "must be a multiple of 16";
                                        },
                                        "MULTIPLE_OF_16"));
  gen_cmd->add_option("--seed", gen.seed, "root seed");
  gen_cmd->add_option("--out", gen_out, "output directory")->required();

  ConfigFlags train_flags;
  std::string resume;
  std::optional<double> target;
  std::size_t eval_every = 10;
  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_flags.attach(train_cmd, true);
  train_cmd->add_option("--resume", resume, "continue from a checkpoint written by train");
  train_cmd->add_option("--target-miou", target, "stop once train mIoU reaches this value");
  train_cmd->add_option("--eval-every", eval_every, "epochs between train-set evaluations");

  ConfigFlags eval_flags;
  std::string split = "val", eval_csv;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_flags.attach(eval_cmd, false);
  eval_cmd->add_option("--split", split, "train, val or all")->check(CLI::IsMember({"train", "val", "all"}));
  eval_cmd->add_option("--csv", eval_csv, "write metrics CSV here");

  ConfigFlags infer_flags;
  InferOptions infer;
  std::string infer_image, infer_out;
  auto* infer_cmd = app.add_subcommand("infer", "predict a mask for one image and expression");
  infer_flags.attach(infer_cmd, false);
  infer_cmd->add_option("--image", infer_image, "input P6 image")->required();
  infer_cmd->add_option("--expression", infer.expression, "referring expression")->required();
  infer_cmd->add_option("--out", infer_out, "output P5 mask")->required();

  ConfigFlags ablate_flags;
  std::string kv_list = "vanilla_LE,advanced_LE,VE", fusion_list = "early", r_list = "0.1,0.3,0.8", toggles,
              ablate_out;
  auto* ablate_cmd = app.add_subcommand("ablate", "train and evaluate a grid of configurations");
  ablate_flags.attach(ablate_cmd, true);
  ablate_cmd->add_option("--kv", kv_list, "key-value sources");
  ablate_cmd->add_option("--fusion", fusion_list, "fusion modes");
  ablate_cmd->add_option("--r", r_list, "retrieval ratios");
  ablate_cmd->add_option("--toggles", toggles, "extra cells: step1,step2,global,local,articles,contrastive");
  ablate_cmd->add_option("--out", ablate_out, "output CSV")->required();

  ConfigFlags dump_flags;
  std::string dump_sample, dump_out;
  auto* dump_cmd = app.add_subcommand("dump-attention", "write relevance, retrieval and decoder attention maps");
  dump_flags.attach(dump_cmd, false);
  dump_cmd->add_option("--sample", dump_sample, "sample directory")->required();
  dump_cmd->add_option("--out", dump_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen_cmd->parsed()) {
      gen.out = gen_out;
      const auto entries = cmd_gen(gen);
      std::cout << "wrote " << entries.size() << " samples to " << gen_out << '\n';
    } else if (train_cmd->parsed()) {
      TrainOptions opts;
      opts.config = train_flags.resolve(false);
      if (!resume.empty()) opts.resume = resume;
      opts.target_miou = target;
      opts.eval_every = eval_every;
      opts.progress = &std::cerr;
      const auto s = cmd_train(opts);
      std::cout << "trained " << s.epochs_run << " epochs (" << s.steps << " steps) in " << s.seconds << " s";
      if (s.train_miou) std::cout << ", train mIoU " << *s.train_miou;
      std::cout << "\ncheckpoint " << opts.config.checkpoint << '\n';
    } else if (eval_cmd->parsed()) {
      EvalOptions opts;
      opts.config = eval_flags.resolve(true);
      opts.split = split;
      print_report(cmd_eval(opts), eval_csv);
    } else if (infer_cmd->parsed()) {
      infer.config = infer_flags.resolve(true);
      infer.image = infer_image;
      infer.out = infer_out;
      cmd_infer(infer);
    } else if (ablate_cmd->parsed()) {
      AblateOptions opts;
      opts.config = ablate_flags.resolve(false);
      opts.kv.clear();
      for (const auto& s : split_list(kv_list)) opts.kv.push_back(parse_kv_source(s));
      opts.fusion.clear();
      for (const auto& s : split_list(fusion_list)) opts.fusion.push_back(parse_fusion_mode(s));
      opts.ratios.clear();
      for (const auto& s : split_list(r_list)) opts.ratios.push_back(std::stod(s));
      opts.toggles = split_list(toggles);
      opts.out = ablate_out;
      opts.progress = &std::cerr;
      const auto results = cmd_ablate(opts);
      std::cout << ablation_summary(results);
      bool all_ok = true;
      for (const auto& r : results) all_ok = all_ok && r.ok;
      return all_ok ? 0 : 1;
    } else if (dump_cmd->parsed()) {
      DumpOptions opts;
      opts.config = dump_flags.resolve(true);
      opts.sample = dump_sample;
      opts.out = dump_out;
      const auto rep = cmd_dump_attention(opts);
      std::cout << "wrote " << rep.files.size() << " files; mask row error " << rep.max_mask_row_error
                << ", attention row error " << rep.max_attention_row_error << '\n';
      if (rep.max_attention_row_error > 1e-6 || rep.max_mask_row_error != 0) {
        std::cerr << "error: dumped maps fail validation\n";
        return 1;
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
