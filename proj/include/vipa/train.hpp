#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include "vipa/data.hpp"
#include "vipa/metrics.hpp"
#include "vipa/model.hpp"
#include "vipa/numerics/checkpoint.hpp"
#include "vipa/numerics/optimizer.hpp"
#include "vipa/vocabulary.hpp"

namespace vipa {

class TrainingDivergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double lr = 1e-3;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  double contrastive_weight = 1.0;
  std::uint64_t seed = 7;
  bool keep_articles = true;
  /// Label-preserving augmentation, redrawn for every sample at every step.
  AugmentConfig augment;
  /// Worker threads for per-sample gradients; results do not depend on it.
  std::size_t threads = 1;
  AdamWConfig optimizer;
};

struct StepRecord {
  std::size_t step = 0;
  double seg_loss = 0;
  double contrastive_loss = 0;
  double lr = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double seg_loss = 0;          // mean over the epoch's samples
  double contrastive_loss = 0;
  std::size_t steps = 0;
};

/// Word ids for every sample, computed once.
std::vector<std::vector<std::size_t>> tokenize_samples(const Vocabulary& vocab, const std::vector<Sample>& samples,
                                                       bool keep_articles);

/// Minibatch AdamW training with polynomial learning-rate decay. Each sample
/// builds its own tape; gradients are summed in sample order.
template <typename T>
class Trainer {
 public:
  Trainer(VipaModel<T>& model, const Vocabulary& vocab, TrainConfig cfg, std::size_t total_steps);

  /// One pass over `data` in a seed-determined order.
  EpochRecord train_epoch(const std::vector<Sample>& data);
  /// One optimizer step on the listed samples.
  StepRecord train_step(const std::vector<Sample>& data, const std::vector<std::size_t>& batch);

  std::size_t step() const { return optimizer_.step_count(); }
  std::size_t epoch() const { return epoch_; }
  double current_lr() const;
  const std::vector<StepRecord>& log() const { return log_; }

  /// Parameters plus optimizer moments and counters.
  Checkpoint checkpoint() const;
  void resume(const Checkpoint& ckpt);

  std::function<void(const StepRecord&)> on_step;

 private:
  VipaModel<T>& model_;
  const Vocabulary& vocab_;
  TrainConfig cfg_;
  std::size_t total_steps_;
  AdamW<T> optimizer_;
  std::size_t epoch_ = 0;
  std::vector<StepRecord> log_;
  const std::vector<Sample>* tokenized_for_ = nullptr;
  std::vector<std::vector<std::size_t>> words_;
};

struct EvalResult {
  EvalAccumulator accumulator;
  std::vector<std::vector<std::uint8_t>> predictions;  // only when requested
};

/// Eval-mode predictions scored against the ground-truth masks. Samples are
/// spread over `threads` workers; the accumulator is filled in sample order.
template <typename T>
EvalResult evaluate(const VipaModel<T>& model, const Vocabulary& vocab, const std::vector<Sample>& samples,
                    bool keep_articles, std::size_t threads = 1, bool keep_predictions = false);

void write_training_log(const std::filesystem::path& path, const std::vector<StepRecord>& records);

std::size_t steps_per_epoch(std::size_t samples, std::size_t batch_size);

extern template class Trainer<float>;
extern template class Trainer<double>;

}  // namespace vipa
