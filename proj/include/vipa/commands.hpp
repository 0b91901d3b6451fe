#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "vipa/config.hpp"
#include "vipa/data.hpp"
#include "vipa/metrics.hpp"

// Command implementations behind the `vipa` executable.

namespace vipa {

struct GenOptions {
  std::size_t count = 256;            // manifest lines
  std::optional<std::size_t> val;     // held-out-combination samples; default count / 5
  std::size_t size = 64;
  std::uint64_t seed = 7;
  std::filesystem::path out;
};

std::vector<ManifestEntry> cmd_gen(const GenOptions& opts);

struct TrainOptions {
  RunConfig config;
  std::optional<std::filesystem::path> resume;
  /// Stop once train mIoU reaches this value (checked every `eval_every` epochs).
  std::optional<double> target_miou;
  std::size_t eval_every = 10;
  /// In-memory training data; when empty, the manifest under config.data is read.
  const std::vector<Sample>* samples = nullptr;
  std::ostream* progress = nullptr;
};

struct TrainSummary {
  std::size_t epochs_run = 0;
  std::size_t steps = 0;
  double seconds = 0;
  std::optional<double> train_miou;  // last measured value
  bool reached_target = false;
};

/// Trains and writes the checkpoint, its config sidecar and the step log.
/// On divergence the last good state is written before the error propagates.
TrainSummary cmd_train(const TrainOptions& opts);

/// Path of the run config stored next to a checkpoint.
std::filesystem::path config_sidecar(const std::filesystem::path& checkpoint);

struct EvalOptions {
  RunConfig config;  // checkpoint and data taken from here
  std::string split = "val";
  const std::vector<Sample>* samples = nullptr;
};

EvalAccumulator cmd_eval(const EvalOptions& opts);

struct InferOptions {
  RunConfig config;
  std::filesystem::path image;
  std::string expression;
  std::filesystem::path out;  // P5 mask, 0/255
};

void cmd_infer(const InferOptions& opts);

/// One configuration of the ablation sweep.
struct AblationCell {
  KeyValueSource kv = KeyValueSource::ve;
  FusionMode fusion = FusionMode::early;
  double ratio = 0.30;
  bool step1 = true;
  bool step2 = true;
  bool global_cue = true;
  bool local_cue = true;
  bool articles = true;
  bool contrastive = true;
  std::string label;
};

struct AblationResult {
  AblationCell cell;
  bool ok = false;
  std::string error;
  double oiou = 0, miou = 0, p50 = 0, p70 = 0;
  double seconds = 0;
};

struct AblateOptions {
  RunConfig config;  // base configuration shared by every cell
  std::vector<KeyValueSource> kv = {KeyValueSource::vanilla_le, KeyValueSource::advanced_le, KeyValueSource::ve};
  std::vector<FusionMode> fusion = {FusionMode::early};
  std::vector<double> ratios = {0.1, 0.3, 0.8};
  /// Extra single-switch cells: step1, step2, global, local, articles, contrastive.
  std::vector<std::string> toggles;
  std::filesystem::path out;  // CSV
  const std::vector<Sample>* train_samples = nullptr;
  const std::vector<Sample>* val_samples = nullptr;
  std::ostream* progress = nullptr;
  /// Replaces training + evaluation of a cell (used to test the harness).
  std::function<AblationResult(const AblationCell&, const RunConfig&)> runner;
};

std::vector<AblationCell> ablation_cells(const AblateOptions& opts);
std::vector<AblationResult> cmd_ablate(const AblateOptions& opts);
std::string ablation_csv(const std::vector<AblationResult>& results);
std::vector<AblationResult> parse_ablation_csv(const std::string& text);
/// Observed orderings next to the reference expectations; informational only.
std::string ablation_summary(const std::vector<AblationResult>& results);

struct DumpOptions {
  RunConfig config;
  std::filesystem::path sample;  // sample directory
  std::filesystem::path out;
};

struct DumpReport {
  std::size_t rows = 0, tokens = 0, keep = 0;
  double max_mask_row_error = 0;       // |row sum - N_p| over cue rows
  double max_attention_row_error = 0;  // |row sum - 1| over decoder attention rows
  std::vector<std::filesystem::path> files;
};

DumpReport cmd_dump_attention(const DumpOptions& opts);

}  // namespace vipa
