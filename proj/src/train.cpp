#include "vipa/train.hpp"

#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <numeric>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vipa {

std::vector<std::vector<std::size_t>> tokenize_samples(const Vocabulary& vocab, const std::vector<Sample>& samples,
                                                       bool keep_articles) {
  std::vector<std::vector<std::size_t>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(vocab.tokenize(s.expression, !keep_articles));
  return out;
}

std::size_t steps_per_epoch(std::size_t samples, std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  return (samples + batch_size - 1) / batch_size;
}

template <typename T>
Trainer<T>::Trainer(VipaModel<T>& model, const Vocabulary& vocab, TrainConfig cfg, std::size_t total_steps)
    : model_(model), vocab_(vocab), cfg_(cfg), total_steps_(total_steps),
      optimizer_(model.parameters(), cfg.optimizer) {
  if (cfg_.batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (!(cfg_.lr >= 0.0)) throw std::invalid_argument("learning rate must be non-negative");
}

template <typename T>
double Trainer<T>::current_lr() const {
  return polynomial_decay(cfg_.lr, optimizer_.step_count(), total_steps_);
}

template <typename T>
StepRecord Trainer<T>::train_step(const std::vector<Sample>& data, const std::vector<std::size_t>& batch) {
  if (tokenized_for_ != &data || words_.size() != data.size()) {
    words_ = tokenize_samples(vocab_, data, cfg_.keep_articles);
    tokenized_for_ = &data;
  }
  const auto& entries = model_.parameters().entries();
  const std::size_t nb = batch.size();
  std::vector<GradSink<T>> sinks(nb);
  std::vector<double> seg(nb, 0.0), con(nb, 0.0);
  std::vector<std::exception_ptr> errors(nb);
  const std::size_t step_index = optimizer_.step_count();
  const T inv_batch = T(1) / static_cast<T>(nb);

  auto run = [&](std::size_t j) {
    try {
      const std::uint64_t draw = step_index * cfg_.batch_size + j;
      Sample augmented;
      std::vector<std::size_t> augmented_ids;
      if (cfg_.augment.any()) {
        augmented = augment_sample(data[batch[j]], cfg_.augment, derive_seed(cfg_.seed, SeedPurpose::augment, draw));
        augmented_ids = vocab_.tokenize(augmented.expression, !cfg_.keep_articles);
      }
      const auto& s = cfg_.augment.any() ? augmented : data[batch[j]];
      const auto& ids = cfg_.augment.any() ? augmented_ids : words_[batch[j]];
      ForwardOptions<T> fo;
      fo.mode = RetrievalMode::train;
      fo.gumbel_seed = derive_seed(cfg_.seed, SeedPurpose::gumbel, draw);
      fo.target = s.mask;
      fo.contrastive_weight = cfg_.contrastive_weight;
      ScopedGradSink<T> scope(&sinks[j]);
      auto r = model_.forward(s.image, ids, fo);
      seg[j] = static_cast<double>(r.seg_loss.item());
      if (r.contrastive_loss.defined()) con[j] = static_cast<double>(r.contrastive_loss.item());
      auto loss = ops::scale(r.loss, inv_batch);
      loss.backward();
    } catch (...) {
      errors[j] = std::current_exception();
    }
  };

#ifdef _OPENMP
  if (cfg_.threads > 1) {
#pragma omp parallel for schedule(dynamic) num_threads(static_cast<int>(cfg_.threads))
    for (std::size_t j = 0; j < nb; ++j) run(j);
  } else {
    for (std::size_t j = 0; j < nb; ++j) run(j);
  }
#else
  for (std::size_t j = 0; j < nb; ++j) run(j);
#endif

  StepRecord rec;
  rec.step = step_index + 1;
  rec.lr = current_lr();
  for (std::size_t j = 0; j < nb; ++j) {
    if (errors[j]) {
      try {
        std::rethrow_exception(errors[j]);
      } catch (const NumericError& e) {
        throw TrainingDivergedError("non-finite value at step " + std::to_string(rec.step) + " on sample " +
                                    std::to_string(batch[j]) + ": " + e.what());
      }
    }
    rec.seg_loss += seg[j] / static_cast<double>(nb);
    rec.contrastive_loss += con[j] / static_cast<double>(nb);
  }
  if (!std::isfinite(rec.seg_loss) || !std::isfinite(rec.contrastive_loss)) {
    throw TrainingDivergedError("loss is not finite at step " + std::to_string(rec.step));
  }

  // Reduce per-sample gradients in sample order so the sum does not depend
  // on how samples were spread over threads.
  std::vector<std::vector<T>> grads(entries.size());
  for (std::size_t p = 0; p < entries.size(); ++p) {
    grads[p].assign(entries[p].tensor.numel(), T(0));
    const auto* key = entries[p].tensor.node().get();
    for (std::size_t j = 0; j < nb; ++j) {
      auto it = sinks[j].buffers.find(key);
      if (it == sinks[j].buffers.end()) continue;
      for (std::size_t i = 0; i < grads[p].size(); ++i) grads[p][i] += it->second[i];
    }
    for (T g : grads[p]) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw TrainingDivergedError("non-finite gradient for " + entries[p].name + " at step " +
                                    std::to_string(rec.step));
      }
    }
  }
  optimizer_.step(rec.lr, &grads);
  log_.push_back(rec);
  if (on_step) on_step(rec);
  return rec;
}

template <typename T>
EpochRecord Trainer<T>::train_epoch(const std::vector<Sample>& data) {
  if (data.empty()) throw std::invalid_argument("training set is empty");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(cfg_.seed, SeedPurpose::shuffle, epoch_));
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto k = static_cast<std::size_t>(uniform_open01(rng) * static_cast<double>(i)) % i;
    std::swap(order[i - 1], order[k]);
  }
  EpochRecord rec;
  rec.epoch = epoch_;
  for (std::size_t b = 0; b < order.size(); b += cfg_.batch_size) {
    const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(b),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(b + cfg_.batch_size, order.size())));
    const auto s = train_step(data, batch);
    const double w = static_cast<double>(batch.size()) / static_cast<double>(order.size());
    rec.seg_loss += s.seg_loss * w;
    rec.contrastive_loss += s.contrastive_loss * w;
    ++rec.steps;
  }
  ++epoch_;
  return rec;
}

template <typename T>
Checkpoint Trainer<T>::checkpoint() const {
  auto ckpt = snapshot_parameters(model_.parameters());
  const auto& entries = model_.parameters().entries();
  for (std::size_t p = 0; p < entries.size(); ++p) {
    const auto& m = optimizer_.first_moments()[p];
    const auto& v = optimizer_.second_moments()[p];
    ckpt.entries.push_back({"optim.m." + entries[p].name, entries[p].tensor.shape(), {m.begin(), m.end()}});
    ckpt.entries.push_back({"optim.v." + entries[p].name, entries[p].tensor.shape(), {v.begin(), v.end()}});
  }
  ckpt.entries.push_back({"optim.step", {1}, {static_cast<double>(optimizer_.step_count())}});
  ckpt.entries.push_back({"optim.epoch", {1}, {static_cast<double>(epoch_)}});
  return ckpt;
}

template <typename T>
void Trainer<T>::resume(const Checkpoint& ckpt) {
  restore_parameters(model_.parameters(), ckpt);
  const auto* step = ckpt.find("optim.step");
  const auto* epoch = ckpt.find("optim.epoch");
  if (!step || !epoch) throw CheckpointError("checkpoint has no optimizer state to resume from");
  const auto& entries = model_.parameters().entries();
  for (std::size_t p = 0; p < entries.size(); ++p) {
    const auto* m = ckpt.find("optim.m." + entries[p].name);
    const auto* v = ckpt.find("optim.v." + entries[p].name);
    if (!m || !v || m->values.size() != entries[p].tensor.numel() || v->values.size() != entries[p].tensor.numel()) {
      throw CheckpointError("optimizer state missing or malformed for " + entries[p].name);
    }
    auto& dm = optimizer_.first_moments()[p];
    auto& dv = optimizer_.second_moments()[p];
    dm.assign(entries[p].tensor.numel(), T(0));
    dv.assign(entries[p].tensor.numel(), T(0));
    for (std::size_t i = 0; i < dm.size(); ++i) {
      dm[i] = static_cast<T>(m->values[i]);
      dv[i] = static_cast<T>(v->values[i]);
    }
  }
  optimizer_.set_step_count(static_cast<std::size_t>(step->values.at(0)));
  epoch_ = static_cast<std::size_t>(epoch->values.at(0));
}

template <typename T>
EvalResult evaluate(const VipaModel<T>& model, const Vocabulary& vocab, const std::vector<Sample>& samples,
                    bool keep_articles, std::size_t threads, bool keep_predictions) {
  const auto words = tokenize_samples(vocab, samples, keep_articles);
  std::vector<OverlapCounts> counts(samples.size());
  std::vector<std::vector<std::uint8_t>> preds(keep_predictions ? samples.size() : 0);
  std::vector<std::exception_ptr> errors(samples.size());
  auto run = [&](std::size_t i) {
    try {
      NoGradGuard no_grad;
      auto r = model.forward(samples[i].image, words[i]);
      const auto& p = r.segmentation().prediction;
      counts[i] = overlap(p, samples[i].mask);
      if (keep_predictions) preds[i] = p;
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
#ifdef _OPENMP
  if (threads > 1) {
#pragma omp parallel for schedule(dynamic) num_threads(static_cast<int>(threads))
    for (std::size_t i = 0; i < samples.size(); ++i) run(i);
  } else {
    for (std::size_t i = 0; i < samples.size(); ++i) run(i);
  }
#else
  (void)threads;
  for (std::size_t i = 0; i < samples.size(); ++i) run(i);
#endif
  EvalResult out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
    out.accumulator.add_counts(counts[i]);
  }
  out.predictions = std::move(preds);
  return out;
}

void write_training_log(const std::filesystem::path& path, const std::vector<StepRecord>& records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,seg_loss,contrastive_loss,lr\n";
  char buf[160];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g\n", r.step, r.seg_loss, r.contrastive_loss, r.lr);
    out << buf;
  }
}

template class Trainer<float>;
template class Trainer<double>;
template EvalResult evaluate(const VipaModel<float>&, const Vocabulary&, const std::vector<Sample>&, bool,
                             std::size_t, bool);
template EvalResult evaluate(const VipaModel<double>&, const Vocabulary&, const std::vector<Sample>&, bool,
                             std::size_t, bool);

}  // namespace vipa
