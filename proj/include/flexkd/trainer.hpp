#pragma once

#include <cstdint>
#include <vector>

#include "flexkd/data.hpp"
#include "flexkd/losses.hpp"
#include "flexkd/models.hpp"

namespace flexkd {

struct TrainConfig {
  std::int64_t epochs = 30;
  std::int64_t batch_size = 64;
  double lr_initial = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
  /// Epochs (1-based) at which the rate is multiplied by lr_factor. Empty
  /// defaults to steps at 50% and 75% of the run.
  std::vector<std::int64_t> lr_milestones;
  double lr_factor = 0.1;
  std::uint64_t seed = 1;
  std::int64_t eval_every = 1;
  bool drop_last = false;
  DistillConfig distill;

  void validate() const;
  std::vector<std::int64_t> resolved_milestones() const;
  /// lr_initial with lr_factor applied once per milestone <= epoch.
  double lr_at(std::int64_t epoch) const;
};

struct EpochRecord {
  std::int64_t epoch = 0;  // 1-based
  double lr = 0.0;
  std::vector<double> accuracy;  // per sub-model, on the validation set
  double avg_accuracy = 0.0;
  std::vector<LossTerm> mean_terms;  // per-term training means over the epoch
  double mean_total_loss = 0.0;
};

struct BestSnapshot {
  std::int64_t epoch = -1;
  double avg_accuracy = -1.0;
  std::vector<double> accuracy;
  std::vector<Tensor> values;  // full store snapshot, parameters and stats
};

struct TrainResult {
  std::vector<EpochRecord> history;
  BestSnapshot best;
};

/// v <- momentum * v + g + weight_decay * theta; theta <- theta - lr * v;
/// gradients are zeroed afterwards. Buffers are created on first use and
/// mirror the store order. Non-finite gradients abort with the parameter name.
void sgd_step(ParamStore& store, std::vector<Tensor>& momentum_buffers, double lr,
              double momentum, double weight_decay);

/// Per-sub-model accuracy (argmax, ties to the lowest class index), computed
/// in eval mode from one shared forward_all per batch.
std::vector<double> evaluate_all(FlexibleModel& model, const Dataset& dataset,
                                 std::int64_t batch_size = 256);
/// Same for a single sub-model via forward_one (runs only what it needs).
double evaluate_one(FlexibleModel& model, const Dataset& dataset, std::int64_t i,
                    std::int64_t batch_size = 256);

/// Joint training of all sub-models: seeded shuffled mini-batches, one
/// flexible-loss backward per batch, one shared optimizer, periodic
/// validation, and a snapshot of the epoch with the best mean accuracy.
TrainResult train(FlexibleModel& model, const Dataset& train_set, const Dataset& val_set,
                  const TrainConfig& cfg);

}  // namespace flexkd
