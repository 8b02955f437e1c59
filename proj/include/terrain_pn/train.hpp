#pragma once

// Mini-batch Adam training with a staircase learning-rate decay, and split evaluation.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "terrain_pn/datagen.hpp"
#include "terrain_pn/model.hpp"
#include "terrain_pn/numcore.hpp"
#include "terrain_pn/parallel.hpp"
#include "terrain_pn/rng.hpp"

namespace terrain_pn {

struct TrainConfig {
  double initial_lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch_size = 32;
  std::int64_t decay_step = 200000;
  double decay_rate = 0.7;
  int epochs = 30;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  // Stop once test accuracy reaches this value (disabled when unset).
  std::optional<double> stop_at_accuracy;

  void validate() const {
    if (!(initial_lr > 0.0)) throw std::invalid_argument("TrainConfig: initial_lr must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0))
      throw std::invalid_argument("TrainConfig: betas must lie in (0, 1)");
    if (!(epsilon > 0.0)) throw std::invalid_argument("TrainConfig: epsilon must be positive");
    if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be positive");
    if (decay_step <= 0) throw std::invalid_argument("TrainConfig: decay_step must be positive");
    if (!(decay_rate > 0.0 && decay_rate <= 1.0)) throw std::invalid_argument("TrainConfig: decay_rate must lie in (0, 1]");
    if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be non-negative");
    if (threads == 0) throw std::invalid_argument("TrainConfig: threads must be positive");
  }
};

/// Staircase decay: initial_lr * decay_rate^floor(step / decay_step).
inline double lr_schedule(std::int64_t step, const TrainConfig& c) {
  if (step < 0) throw std::invalid_argument("lr_schedule: step must be non-negative");
  return c.initial_lr * std::pow(c.decay_rate, static_cast<double>(step / c.decay_step));
}

struct EpochRecord {
  int epoch = 0;            // 1-based
  std::int64_t step = 0;    // optimizer steps completed so far
  double lr = 0.0;          // rate used by the last step of the epoch
  double train_loss = 0.0;  // sample-weighted mean over the epoch
  double test_loss = 0.0;
  double test_accuracy = 0.0;
  double wall_seconds = 0.0;
};

struct StepRecord {
  std::int64_t step = 0;  // 1-based
  double lr = 0.0;
  double batch_loss = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::vector<StepRecord> steps;
  bool diverged = false;
  std::string error;

  /// First epoch whose test accuracy reaches `threshold`.
  std::optional<int> epoch_reaching(double threshold) const {
    for (const auto& e : epochs)
      if (e.test_accuracy >= threshold) return e.epoch;
    return std::nullopt;
  }
  double final_accuracy() const { return epochs.empty() ? 0.0 : epochs.back().test_accuracy; }
};

using ConfusionMatrix = std::array<std::array<std::size_t, kNumClasses>, kNumClasses>;

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  ConfusionMatrix confusion{};  // rows: true class, columns: predicted class
  std::size_t total = 0;
};

inline double accuracy_from_confusion(const ConfusionMatrix& m) {
  std::size_t correct = 0, total = 0;
  for (int t = 0; t < kNumClasses; ++t)
    for (int p = 0; p < kNumClasses; ++p) {
      total += m[t][p];
      if (t == p) correct += m[t][p];
    }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

class EmptySplitError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Confusion matrix, accuracy and mean cross-entropy from per-sample logits.
inline EvalResult summarize_predictions(std::span<const int> truth, std::span<const std::vector<double>> logits) {
  if (truth.empty()) throw EmptySplitError("evaluate: empty split");
  if (truth.size() != logits.size()) throw DimensionError("evaluate: logits", truth.size(), logits.size());
  EvalResult r;
  r.total = truth.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto& l = logits[i];
    const int pred = static_cast<int>(std::max_element(l.begin(), l.end()) - l.begin());
    r.confusion[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(pred)] += 1;
    const Tensor2D row(1, l.size(), l);
    const int label[] = {truth[i]};
    loss += softmax_cross_entropy(row, label).loss;
  }
  r.mean_loss = loss / static_cast<double>(truth.size());
  r.accuracy = accuracy_from_confusion(r.confusion);
  return r;
}

inline EvalResult evaluate(const ModelWeights& w, const Dataset& ds, const std::vector<std::size_t>& indices,
                           unsigned threads = 1) {
  if (indices.empty()) throw EmptySplitError("evaluate: empty split");
  std::vector<std::vector<double>> logits(indices.size());
  std::vector<int> truth(indices.size());
  parallel_for(indices.size(), threads, [&](std::size_t i) {
    logits[i] = forward(w, ds.cloud(indices[i])).logits;
    truth[i] = static_cast<int>(ds.label(indices[i]));
  });
  return summarize_predictions(truth, logits);
}

inline EvalResult evaluate(const ModelWeights& w, const Dataset& ds, Split split, unsigned threads = 1) {
  return evaluate(w, ds, ds.indices(split), threads);
}

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  ModelWeights weights;
  TrainHistory history;
};

/// Called after every epoch; return false to stop early.
using EpochCallback = std::function<bool(const EpochRecord&)>;

/// Trains from fresh weights (seeded from config.seed). A non-finite loss or
/// gradient stops training; the result then carries the last good weights and
/// the history so far with `diverged` set.
inline TrainResult train(const ModelSpec& spec, const Dataset& ds, const TrainConfig& config,
                         const EpochCallback& on_epoch = {}) {
  config.validate();
  TrainResult result{build_model(spec, mix_seed(config.seed, 0)), {}};
  if (config.epochs == 0) return result;

  const auto train_idx = ds.indices(Split::Train);
  const auto test_idx = ds.indices(Split::Test);
  if (train_idx.empty() || test_idx.empty()) throw EmptySplitError("train: dataset needs both train and test samples");

  ModelWeights& w = result.weights;
  TrainHistory& hist = result.history;
  AdamState adam(w.param_count(), config.beta1, config.beta2, config.epsilon);
  Rng shuffle_rng(mix_seed(config.seed, 1));
  std::vector<std::size_t> order = train_idx;
  std::int64_t step = 0;

  const unsigned threads = std::max(1U, config.threads);
  std::vector<ModelWeights> sample_grads(threads, w.zeros_like());
  std::vector<double> sample_loss(threads, 0.0);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    double lr = 0.0;
    try {
      for (std::size_t b0 = 0; b0 < order.size(); b0 += config.batch_size) {
        const std::size_t bn = std::min(config.batch_size, order.size() - b0);
        const double scale = 1.0 / static_cast<double>(bn);
        ModelWeights grads = w.zeros_like();
        double batch_loss = 0.0;
        // Per-sample gradients are formed independently and summed in sample
        // order, so the thread count never changes the result.
        for (std::size_t s0 = 0; s0 < bn; s0 += threads) {
          const std::size_t wave = std::min<std::size_t>(threads, bn - s0);
          parallel_for(wave, threads, [&](std::size_t t) {
            ModelWeights& g = sample_grads[t];
            g.for_each_layer([](LinearLayer& l) {
              std::fill(l.weights.values().begin(), l.weights.values().end(), 0.0);
              std::fill(l.bias.begin(), l.bias.end(), 0.0);
            });
            const std::size_t idx = order[b0 + s0 + t];
            const PointCloud cloud = ds.cloud(idx);
            sample_loss[t] = accumulate_sample_gradient(w, cloud.points, static_cast<int>(ds.label(idx)), scale, g);
          });
          for (std::size_t t = 0; t < wave; ++t) {
            grads.add(sample_grads[t]);
            batch_loss += scale * sample_loss[t];
          }
        }
        lr = lr_schedule(step, config);
        std::vector<double> params = w.flatten();
        const std::vector<double> flat_grads = grads.flatten();
        adam_step(params, flat_grads, adam, lr);
        if (!all_finite(params)) throw NonFiniteError("parameters became non-finite");
        w.assign(params);
        ++step;
        hist.steps.push_back({step, lr, batch_loss});
        epoch_loss += batch_loss * static_cast<double>(bn);
      }
    } catch (const NonFiniteLossError& e) {
      hist.diverged = true;
      hist.error = e.what();
      return result;
    } catch (const NonFiniteError& e) {
      hist.diverged = true;
      hist.error = e.what();
      return result;
    }

    const EvalResult test = evaluate(w, ds, test_idx, threads);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.step = step;
    rec.lr = lr;
    rec.train_loss = epoch_loss / static_cast<double>(order.size());
    rec.test_loss = test.mean_loss;
    rec.test_accuracy = test.accuracy;
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    hist.epochs.push_back(rec);
    if (!std::isfinite(rec.test_loss)) {
      hist.diverged = true;
      hist.error = "non-finite test loss";
      return result;
    }
    if (on_epoch && !on_epoch(rec)) break;
    if (config.stop_at_accuracy && rec.test_accuracy >= *config.stop_at_accuracy) break;
  }
  return result;
}

}  // namespace terrain_pn
