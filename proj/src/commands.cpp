#include "vipa/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include "vipa/model.hpp"
#include "vipa/numerics/checkpoint.hpp"
#include "vipa/train.hpp"
#include "vipa/vocabulary.hpp"

namespace vipa {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

ModelConfig model_config(const RunConfig& cfg, const Vocabulary& vocab) {
  ModelConfig mc = cfg.model;
  mc.vocab_size = vocab.size();
  return mc;
}

template <typename T>
std::unique_ptr<VipaModel<T>> make_model(const RunConfig& cfg, const Vocabulary& vocab) {
  return std::make_unique<VipaModel<T>>(model_config(cfg, vocab), derive_seed(cfg.train.seed, SeedPurpose::init));
}

template <typename T>
std::unique_ptr<VipaModel<T>> load_model(const RunConfig& cfg, const Vocabulary& vocab) {
  if (cfg.checkpoint.empty()) throw std::invalid_argument("no checkpoint given");
  auto model = make_model<T>(cfg, vocab);
  restore_parameters(model->parameters(), read_checkpoint(cfg.checkpoint));
  return model;
}

std::filesystem::path manifest_path(const RunConfig& cfg) {
  if (cfg.data.empty()) throw std::invalid_argument("no dataset directory given");
  return std::filesystem::path(cfg.data) / kManifestName;
}

std::vector<Sample> split_samples(const RunConfig& cfg, const std::string& split) {
  auto samples = load_split(manifest_path(cfg), split);
  if (samples.empty()) throw std::runtime_error("split '" + split + "' of " + cfg.data + " is empty");
  return samples;
}

void write_log(const std::filesystem::path& path, const std::vector<StepRecord>& records, bool append) {
  if (!append || !std::filesystem::exists(path)) {
    write_training_log(path, records);
    return;
  }
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + path.string());
  char buf[160];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g\n", r.step, r.seg_loss, r.contrastive_loss, r.lr);
    out << buf;
  }
}

template <typename T>
struct TrainedModel {
  std::unique_ptr<VipaModel<T>> model;
  TrainSummary summary;
};

// Shared by `train` and the ablation sweep. `on_state` sees the trainer after
// the run, or before an error propagates.
template <typename T>
TrainedModel<T> train_model(const RunConfig& cfg, const Vocabulary& vocab, const std::vector<Sample>& samples,
                            const TrainOptions& opts, const std::function<void(Trainer<T>&)>& on_state) {
  if (samples.empty()) throw std::invalid_argument("training set is empty");
  TrainedModel<T> out;
  out.model = make_model<T>(cfg, vocab);
  const std::size_t total = cfg.train.epochs * steps_per_epoch(samples.size(), cfg.train.batch_size);
  Trainer<T> trainer(*out.model, vocab, cfg.train, std::max<std::size_t>(total, 1));
  if (opts.resume) trainer.resume(read_checkpoint(*opts.resume));
  const auto t0 = Clock::now();
  try {
    while (trainer.epoch() < cfg.train.epochs) {
      const auto rec = trainer.train_epoch(samples);
      ++out.summary.epochs_run;
      const bool check = opts.target_miou && opts.eval_every > 0 &&
                         (trainer.epoch() % opts.eval_every == 0 || trainer.epoch() == cfg.train.epochs);
      if (check) {
        const auto ev = evaluate(*out.model, vocab, samples, cfg.train.keep_articles, cfg.eval_threads);
        out.summary.train_miou = miou(ev.accumulator);
      }
      if (opts.progress) {
        char buf[200];
        std::snprintf(buf, sizeof buf, "epoch %zu  seg_loss %.5f  contrastive_loss %.5f  lr %.3g", trainer.epoch(),
                      rec.seg_loss, rec.contrastive_loss, trainer.current_lr());
        *opts.progress << buf;
        if (check) *opts.progress << "  train_mIoU " << *out.summary.train_miou;
        *opts.progress << "  (" << static_cast<int>(seconds_since(t0)) << " s)\n" << std::flush;
      }
      if (check && *out.summary.train_miou >= *opts.target_miou) {
        out.summary.reached_target = true;
        break;
      }
    }
  } catch (...) {
    if (on_state) on_state(trainer);
    throw;
  }
  out.summary.steps = trainer.step();
  out.summary.seconds = seconds_since(t0);
  if (on_state) on_state(trainer);
  return out;
}

template <typename T>
TrainSummary train_impl(const TrainOptions& opts) {
  const auto& cfg = opts.config;
  if (cfg.checkpoint.empty()) throw std::invalid_argument("no checkpoint path given");
  const auto vocab = Vocabulary::scene_grammar();
  std::vector<Sample> loaded;
  const auto* samples = opts.samples;
  if (!samples) {
    loaded = split_samples(cfg, "train");
    samples = &loaded;
  }
  const std::filesystem::path ckpt_path = cfg.checkpoint;
  if (ckpt_path.has_parent_path()) std::filesystem::create_directories(ckpt_path.parent_path());
  auto persist = [&](Trainer<T>& trainer) {
    write_checkpoint(ckpt_path, trainer.checkpoint());
    std::ofstream(config_sidecar(ckpt_path)) << cfg.to_text();
    if (!cfg.log.empty()) write_log(cfg.log, trainer.log(), opts.resume.has_value());
  };
  auto trained = train_model<T>(cfg, vocab, *samples, opts, persist);
  return trained.summary;
}

template <typename T>
EvalAccumulator eval_impl(const EvalOptions& opts) {
  const auto vocab = Vocabulary::scene_grammar();
  auto model = load_model<T>(opts.config, vocab);
  std::vector<Sample> loaded;
  const auto* samples = opts.samples;
  if (!samples) {
    loaded = split_samples(opts.config, opts.split);
    samples = &loaded;
  }
  return evaluate(*model, vocab, *samples, opts.config.train.keep_articles, opts.config.eval_threads).accumulator;
}

template <typename T>
void infer_impl(const InferOptions& opts) {
  const auto vocab = Vocabulary::scene_grammar();
  auto model = load_model<T>(opts.config, vocab);
  const auto img = read_ppm(opts.image);
  const auto words = vocab.tokenize(opts.expression, !opts.config.train.keep_articles);
  NoGradGuard no_grad;
  const auto r = model->forward(img, words);
  std::vector<std::uint8_t> gray(r.segmentation().prediction.size());
  for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = r.segmentation().prediction[i] ? 255 : 0;
  write_pgm(opts.out, img.height, img.width, gray);
}

template <typename T>
AblationResult run_cell(const AblationCell& cell, const RunConfig& cfg, const std::vector<Sample>& train,
                        const std::vector<Sample>& val) {
  AblationResult res;
  res.cell = cell;
  const auto vocab = Vocabulary::scene_grammar();
  TrainOptions topts;
  topts.config = cfg;
  const auto t0 = Clock::now();
  auto trained = train_model<T>(cfg, vocab, train, topts, {});
  const auto ev = evaluate(*trained.model, vocab, val, cfg.train.keep_articles, cfg.eval_threads);
  res.seconds = seconds_since(t0);
  res.oiou = oiou(ev.accumulator);
  res.miou = miou(ev.accumulator);
  res.p50 = precision_at(ev.accumulator, 0.5);
  res.p70 = precision_at(ev.accumulator, 0.7);
  res.ok = true;
  return res;
}

RunConfig cell_config(const RunConfig& base, const AblationCell& c) {
  RunConfig cfg = base;
  cfg.model.kv_source = c.kv;
  cfg.model.fusion = c.fusion;
  cfg.model.retrieval_ratio = c.ratio;
  cfg.model.use_retrieval = c.step1;
  cfg.model.use_refinement = c.step2;
  cfg.model.global_cue = c.global_cue;
  cfg.model.local_cue = c.local_cue;
  cfg.train.keep_articles = c.articles;
  if (!c.contrastive) cfg.train.contrastive_weight = 0.0;
  return cfg;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::uint8_t> rescale(std::span<const double> v) {
  double lo = v.empty() ? 0 : v[0], hi = lo;
  for (double x : v) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  std::vector<std::uint8_t> out(v.size(), 0);
  if (hi > lo) {
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<std::uint8_t>(std::lround((v[i] - lo) / (hi - lo) * 255.0));
  }
  return out;
}

template <typename T>
DumpReport dump_impl(const DumpOptions& opts) {
  const auto vocab = Vocabulary::scene_grammar();
  auto model = load_model<T>(opts.config, vocab);
  const auto sample = load_sample(opts.sample);
  const auto words = vocab.tokenize(sample.expression, !opts.config.train.keep_articles);
  NoGradGuard no_grad;
  ForwardOptions<T> fo;
  fo.record_attention = true;
  const auto r = model->forward(sample.image, words, fo);

  std::filesystem::create_directories(opts.out);
  DumpReport rep;
  const auto& scores = r.veg.relevance.scores;
  rep.rows = scores.rows();
  rep.tokens = scores.cols();
  rep.keep = r.veg.retrieval.keep_count;
  const Grid g4 = r.encoded.vision.grids.back();

  std::vector<std::string> names{"[CLS]"};
  for (auto id : r.encoded.language.word_ids) names.push_back(vocab.word(id));
  names.resize(rep.rows, "<pad>");

  auto add = [&](const std::filesystem::path& p) { rep.files.push_back(p); };
  std::ostringstream rel, mask;
  rel << "token";
  mask << "token";
  for (std::size_t i = 0; i < rep.tokens; ++i) {
    rel << ",p" << i;
    mask << ",p" << i;
  }
  rel << '\n';
  mask << '\n';
  const auto sv = scores.values();
  for (std::size_t j = 0; j < rep.rows; ++j) {
    rel << names[j];
    mask << names[j];
    std::vector<double> row(rep.tokens), mrow(rep.tokens);
    double msum = 0;
    for (std::size_t i = 0; i < rep.tokens; ++i) {
      row[i] = static_cast<double>(sv[j * rep.tokens + i]);
      mrow[i] = r.veg.retrieval.hard_mask[j * rep.tokens + i];
      msum += mrow[i];
      rel << ',' << fmt(row[i]);
      mask << ',' << static_cast<int>(mrow[i]);
    }
    rel << '\n';
    mask << '\n';
    if (r.cue_valid[j]) {
      const double expect = model->config().use_retrieval ? static_cast<double>(rep.keep) : static_cast<double>(rep.tokens);
      rep.max_mask_row_error = std::max(rep.max_mask_row_error, std::abs(msum - expect));
    }
    const auto rp = opts.out / ("relevance_row" + std::to_string(j) + ".pgm");
    write_pgm(rp, g4.h, g4.w, rescale(row));
    add(rp);
    const auto mp = opts.out / ("mask_row" + std::to_string(j) + ".pgm");
    std::vector<std::uint8_t> mg(rep.tokens);
    for (std::size_t i = 0; i < rep.tokens; ++i) mg[i] = mrow[i] > 0 ? 255 : 0;
    write_pgm(mp, g4.h, g4.w, mg);
    add(mp);
  }
  write_text(opts.out / "relevance.csv", rel.str());
  add(opts.out / "relevance.csv");
  write_text(opts.out / "mask.csv", mask.str());
  add(opts.out / "mask.csv");

  for (std::size_t s = 0; s < r.decoder.attention.size(); ++s) {
    const auto& probs = r.decoder.attention[s];
    const auto mean = probs.head_mean();
    const Grid g = r.decoder.grids[s];
    std::ostringstream csv;
    csv << "query";
    for (std::size_t k = 0; k < probs.nk; ++k) csv << ',' << names[k];
    csv << '\n';
    for (std::size_t q = 0; q < probs.nq; ++q) {
      csv << q;
      double sum = 0;
      for (std::size_t k = 0; k < probs.nk; ++k) {
        sum += static_cast<double>(mean[q * probs.nk + k]);
        csv << ',' << fmt(static_cast<double>(mean[q * probs.nk + k]));
      }
      csv << '\n';
      rep.max_attention_row_error = std::max(rep.max_attention_row_error, std::abs(sum - 1.0));
    }
    const auto cp = opts.out / ("decoder_attention_stage" + std::to_string(s + 1) + ".csv");
    write_text(cp, csv.str());
    add(cp);
    for (std::size_t k = 0; k < probs.nk; ++k) {
      if (!r.kv.valid[k]) continue;
      std::vector<double> col(probs.nq);
      for (std::size_t q = 0; q < probs.nq; ++q) col[q] = static_cast<double>(mean[q * probs.nk + k]);
      const auto hp = opts.out / ("decoder_attention_stage" + std::to_string(s + 1) + "_kv" + std::to_string(k) + ".pgm");
      write_pgm(hp, g.h, g.w, rescale(col));
      add(hp);
    }
  }
  return rep;
}

}  // namespace

std::filesystem::path config_sidecar(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p += ".cfg";
  return p;
}

std::vector<ManifestEntry> cmd_gen(const GenOptions& opts) {
  if (opts.count == 0) throw std::invalid_argument("--n must be positive");
  if (opts.out.empty()) throw std::invalid_argument("no output directory given");
  const std::size_t val = opts.val.value_or(opts.count / 5);
  if (val > opts.count) throw std::invalid_argument("--val exceeds --n");
  DatasetSpec spec;
  spec.train = opts.count - val;
  spec.val = val;
  spec.image_size = opts.size;
  spec.seed = opts.seed;
  return generate_dataset(opts.out, spec);
}

TrainSummary cmd_train(const TrainOptions& opts) {
  opts.config.validate();
  return opts.config.precision == PrecisionFlag::f64 ? train_impl<double>(opts) : train_impl<float>(opts);
}

EvalAccumulator cmd_eval(const EvalOptions& opts) {
  opts.config.validate();
  return opts.config.precision == PrecisionFlag::f64 ? eval_impl<double>(opts) : eval_impl<float>(opts);
}

void cmd_infer(const InferOptions& opts) {
  opts.config.validate();
  if (opts.config.precision == PrecisionFlag::f64) {
    infer_impl<double>(opts);
  } else {
    infer_impl<float>(opts);
  }
}

DumpReport cmd_dump_attention(const DumpOptions& opts) {
  opts.config.validate();
  return opts.config.precision == PrecisionFlag::f64 ? dump_impl<double>(opts) : dump_impl<float>(opts);
}

std::vector<AblationCell> ablation_cells(const AblateOptions& opts) {
  std::vector<AblationCell> cells;
  for (auto kv : opts.kv)
    for (auto f : opts.fusion)
      for (double r : opts.ratios) {
        AblationCell c;
        c.kv = kv;
        c.fusion = f;
        c.ratio = r;
        c.label = "grid";
        cells.push_back(c);
      }
  for (const auto& t : opts.toggles) {
    AblationCell c;
    c.kv = opts.config.model.kv_source;
    c.fusion = opts.config.model.fusion;
    c.ratio = opts.config.model.retrieval_ratio;
    c.label = "no_" + t;
    if (t == "step1") c.step1 = false;
    else if (t == "step2") c.step2 = false;
    else if (t == "global") c.global_cue = false;
    else if (t == "local") c.local_cue = false;
    else if (t == "articles") c.articles = false;
    else if (t == "contrastive") c.contrastive = false;
    else throw std::invalid_argument("unknown ablation toggle '" + t + "'");
    cells.push_back(c);
  }
  return cells;
}

std::vector<AblationResult> cmd_ablate(const AblateOptions& opts) {
  const auto cells = ablation_cells(opts);
  std::vector<Sample> train_loaded, val_loaded;
  const auto* train = opts.train_samples;
  const auto* val = opts.val_samples;
  if (!opts.runner) {
    if (!train) {
      train_loaded = split_samples(opts.config, "train");
      train = &train_loaded;
    }
    if (!val) {
      val_loaded = split_samples(opts.config, "val");
      val = &val_loaded;
    }
  }
  std::vector<AblationResult> results;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& c = cells[i];
    AblationResult res;
    res.cell = c;
    try {
      const auto cfg = cell_config(opts.config, c);
      cfg.validate();
      if (opts.runner) {
        res = opts.runner(c, cfg);
        res.cell = c;
      } else {
        res = cfg.precision == PrecisionFlag::f64 ? run_cell<double>(c, cfg, *train, *val)
                                                  : run_cell<float>(c, cfg, *train, *val);
      }
    } catch (const std::exception& e) {
      res.ok = false;
      res.error = e.what();
    }
    results.push_back(res);
    if (opts.progress) {
      *opts.progress << "[" << i + 1 << "/" << cells.size() << "] " << c.label << " kv=" << to_string(c.kv)
                     << " fusion=" << to_string(c.fusion) << " r=" << c.ratio << " -> ";
      if (res.ok) {
        *opts.progress << "oIoU " << res.oiou << " mIoU " << res.miou << '\n';
      } else {
        *opts.progress << "FAILED: " << res.error << '\n';
      }
      opts.progress->flush();
    }
    if (!opts.out.empty()) write_text(opts.out, ablation_csv(results));
  }
  return results;
}

namespace {
const char* kAblationHeader =
    "label,kv_source,fusion,ratio,step1,step2,global_cue,local_cue,articles,contrastive,status,oIoU,mIoU,P@0.5,P@0.7,"
    "seconds";

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> f;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      f.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  f.push_back(cur);
  return f;
}

bool parse_flag(const std::string& s) {
  if (s == "1") return true;
  if (s == "0") return false;
  throw std::invalid_argument("ablation CSV: expected 0/1, got '" + s + "'");
}
}  // namespace

std::string ablation_csv(const std::vector<AblationResult>& results) {
  std::ostringstream o;
  o << kAblationHeader << '\n';
  for (const auto& r : results) {
    const auto& c = r.cell;
    o << c.label << ',' << to_string(c.kv) << ',' << to_string(c.fusion) << ',' << fmt(c.ratio) << ',' << c.step1 << ','
      << c.step2 << ',' << c.global_cue << ',' << c.local_cue << ',' << c.articles << ',' << c.contrastive << ',';
    if (r.ok) {
      o << "ok," << fmt(r.oiou) << ',' << fmt(r.miou) << ',' << fmt(r.p50) << ',' << fmt(r.p70) << ',' << fmt(r.seconds);
    } else {
      o << csv_escape("FAILED: " + r.error) << ",,,,,";
    }
    o << '\n';
  }
  return o.str();
}

std::vector<AblationResult> parse_ablation_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kAblationHeader) throw std::invalid_argument("ablation CSV: bad header");
  std::vector<AblationResult> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 16) throw std::invalid_argument("ablation CSV: expected 16 fields, got " + std::to_string(f.size()));
    AblationResult r;
    auto& c = r.cell;
    c.label = f[0];
    c.kv = parse_kv_source(f[1]);
    c.fusion = parse_fusion_mode(f[2]);
    c.ratio = std::stod(f[3]);
    c.step1 = parse_flag(f[4]);
    c.step2 = parse_flag(f[5]);
    c.global_cue = parse_flag(f[6]);
    c.local_cue = parse_flag(f[7]);
    c.articles = parse_flag(f[8]);
    c.contrastive = parse_flag(f[9]);
    if (f[10] == "ok") {
      r.ok = true;
      r.oiou = std::stod(f[11]);
      r.miou = std::stod(f[12]);
      r.p50 = std::stod(f[13]);
      r.p70 = std::stod(f[14]);
      r.seconds = std::stod(f[15]);
    } else {
      const std::string prefix = "FAILED: ";
      if (f[10].rfind(prefix, 0) != 0) throw std::invalid_argument("ablation CSV: bad status '" + f[10] + "'");
      r.error = f[10].substr(prefix.size());
    }
    out.push_back(r);
  }
  return out;
}

std::string ablation_summary(const std::vector<AblationResult>& results) {
  std::ostringstream o;
  // Best oIoU per key-value source and per ratio over the default grid cells.
  auto best = [&](auto pred) {
    std::optional<double> v;
    for (const auto& r : results)
      if (r.ok && r.cell.label == "grid" && pred(r.cell)) v = std::max(v.value_or(-1.0), r.oiou);
    return v;
  };
  const auto ve = best([](const AblationCell& c) { return c.kv == KeyValueSource::ve; });
  const auto adv = best([](const AblationCell& c) { return c.kv == KeyValueSource::advanced_le; });
  const auto van = best([](const AblationCell& c) { return c.kv == KeyValueSource::vanilla_le; });
  o << "expected ordering VE > advanced_LE > vanilla_LE: ";
  if (ve && adv && van) {
    o << "observed " << *ve << " / " << *adv << " / " << *van << " -> "
      << ((*ve > *adv && *adv > *van) ? "holds" : "does not hold") << '\n';
  } else {
    o << "not all sources available\n";
  }
  std::optional<double> best_r;
  double best_v = -1;
  for (const auto& r : results) {
    if (r.ok && r.cell.label == "grid" && r.cell.kv == KeyValueSource::ve && r.oiou > best_v) {
      best_v = r.oiou;
      best_r = r.cell.ratio;
    }
  }
  o << "expected best ratio r = 0.3: ";
  if (best_r) {
    o << "observed best r = " << *best_r << " (oIoU " << best_v << ")\n";
  } else {
    o << "no VE cells\n";
  }
  return o.str();
}

}  // namespace vipa
