#include "vipa/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace vipa {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

std::size_t to_positive(const std::string& key, const std::string& v) {
  const auto n = to_u64(key, v);
  if (n == 0) throw ConfigError(key + ": must be positive");
  return static_cast<std::size_t>(n);
}

double to_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(d)) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  return d;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string fmt(double d) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", d);
  return buf;
}

std::string fmt(bool b) { return b ? "true" : "false"; }

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  auto& m = model;
  auto& t = train;
  const auto& v = value;
  try {
    if (key == "image_size") m.image_size = to_positive(key, v);
    else if (key == "base_channels") m.base_channels = to_positive(key, v);
    else if (key == "model_dim") m.model_dim = to_positive(key, v);
    else if (key == "joint_dim") m.joint_dim = to_positive(key, v);
    else if (key == "heads") m.heads = to_positive(key, v);
    else if (key == "mlp_ratio") m.mlp_ratio = to_double(key, v);
    else if (key == "language_layers") m.language_layers = to_u64(key, v);
    else if (key == "retrieval_ratio") m.retrieval_ratio = to_double(key, v);
    else if (key == "tau_init") m.tau_init = to_double(key, v);
    else if (key == "contrast_scale_init") m.contrast_scale_init = to_double(key, v);
    else if (key == "fusion") m.fusion = parse_fusion_mode(v);
    else if (key == "kv_source") m.kv_source = parse_kv_source(v);
    else if (key == "use_retrieval") m.use_retrieval = to_bool(key, v);
    else if (key == "use_refinement") m.use_refinement = to_bool(key, v);
    else if (key == "global_cue") m.global_cue = to_bool(key, v);
    else if (key == "local_cue") m.local_cue = to_bool(key, v);
    else if (key == "contrastive_weight") t.contrastive_weight = to_double(key, v);
    else if (key == "articles") t.keep_articles = to_bool(key, v);
    else if (key == "augment_mirror") t.augment.mirror = to_bool(key, v);
    else if (key == "augment_recolor") t.augment.recolor = to_bool(key, v);
    else if (key == "augment_shift") t.augment.shift = to_bool(key, v);
    else if (key == "lr") t.lr = to_double(key, v);
    else if (key == "epochs") t.epochs = to_u64(key, v);
    else if (key == "batch_size") t.batch_size = to_positive(key, v);
    else if (key == "seed") t.seed = to_u64(key, v);
    else if (key == "threads") t.threads = to_positive(key, v);
    else if (key == "eval_threads") eval_threads = to_positive(key, v);
    else if (key == "weight_decay") t.optimizer.weight_decay = to_double(key, v);
    else if (key == "clip_norm") t.optimizer.clip_norm = to_double(key, v);
    else if (key == "precision") {
      if (v == "f32" || v == "float32") precision = PrecisionFlag::f32;
      else if (v == "f64" || v == "float64") precision = PrecisionFlag::f64;
      else throw ConfigError("precision: expected f32 or f64, got '" + v + "'");
    }
    else if (key == "data") data = v;
    else if (key == "checkpoint") checkpoint = v;
    else if (key == "log") log = v;
    else throw ConfigError("unknown config key '" + key + "'");
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

void RunConfig::validate() const {
  if (train.lr < 0) throw ConfigError("lr must be non-negative");
  if (train.contrastive_weight < 0) throw ConfigError("contrastive_weight must be non-negative");
  if (train.optimizer.weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  ModelConfig probe = model;
  if (probe.vocab_size == 0) probe.vocab_size = 1;
  try {
    probe.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

std::string RunConfig::to_text() const {
  std::ostringstream o;
  const auto& m = model;
  const auto& t = train;
  o << "image_size = " << m.image_size << '\n'
    << "base_channels = " << m.base_channels << '\n'
    << "model_dim = " << m.model_dim << '\n'
    << "joint_dim = " << m.joint_dim << '\n'
    << "heads = " << m.heads << '\n'
    << "mlp_ratio = " << fmt(m.mlp_ratio) << '\n'
    << "language_layers = " << m.language_layers << '\n'
    << "retrieval_ratio = " << fmt(m.retrieval_ratio) << '\n'
    << "tau_init = " << fmt(m.tau_init) << '\n'
    << "contrast_scale_init = " << fmt(m.contrast_scale_init) << '\n'
    << "fusion = " << to_string(m.fusion) << '\n'
    << "kv_source = " << to_string(m.kv_source) << '\n'
    << "use_retrieval = " << fmt(m.use_retrieval) << '\n'
    << "use_refinement = " << fmt(m.use_refinement) << '\n'
    << "global_cue = " << fmt(m.global_cue) << '\n'
    << "local_cue = " << fmt(m.local_cue) << '\n'
    << "contrastive_weight = " << fmt(t.contrastive_weight) << '\n'
    << "articles = " << fmt(t.keep_articles) << '\n'
    << "augment_mirror = " << fmt(t.augment.mirror) << '\n'
    << "augment_recolor = " << fmt(t.augment.recolor) << '\n'
    << "augment_shift = " << fmt(t.augment.shift) << '\n'
    << "lr = " << fmt(t.lr) << '\n'
    << "epochs = " << t.epochs << '\n'
    << "batch_size = " << t.batch_size << '\n'
    << "seed = " << t.seed << '\n'
    << "threads = " << t.threads << '\n'
    << "eval_threads = " << eval_threads << '\n'
    << "weight_decay = " << fmt(t.optimizer.weight_decay) << '\n'
    << "clip_norm = " << fmt(t.optimizer.clip_norm) << '\n'
    << "precision = " << (precision == PrecisionFlag::f32 ? "f32" : "f64") << '\n';
  if (!data.empty()) o << "data = " << data << '\n';
  if (!checkpoint.empty()) o << "checkpoint = " << checkpoint << '\n';
  if (!log.empty()) o << "log = " << log << '\n';
  return o.str();
}

RunConfig parse_run_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    try {
      base.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_run_config(ss.str(), std::move(base));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void apply_seed_env(RunConfig& cfg) {
  if (const char* s = std::getenv("VIPA_SEED"); s && *s) cfg.set("seed", s);
}

}  // namespace vipa
