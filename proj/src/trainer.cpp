#include "flexkd/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "flexkd/errors.hpp"

namespace flexkd {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
  if (!(lr_initial > 0.0)) throw ConfigError("train.lr_initial must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ConfigError("train.momentum must lie in [0, 1)");
  }
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be non-negative");
  if (!(lr_factor > 0.0)) throw ConfigError("train.lr_factor must be positive");
  if (eval_every < 1) throw ConfigError("train.eval_every must be at least 1");
  std::int64_t prev = 0;
  for (std::int64_t m : lr_milestones) {
    if (m < 1 || m > epochs) {
      throw ConfigError("train.lr_milestones entries must lie in [1, epochs]");
    }
    if (m <= prev) throw ConfigError("train.lr_milestones must be strictly ascending");
    prev = m;
  }
  distill.validate();
}

std::vector<std::int64_t> TrainConfig::resolved_milestones() const {
  if (!lr_milestones.empty()) return lr_milestones;
  std::vector<std::int64_t> out;
  for (std::int64_t m : {epochs / 2, epochs * 3 / 4}) {
    if (m >= 2 && (out.empty() || m > out.back())) out.push_back(m);
  }
  return out;
}

double TrainConfig::lr_at(std::int64_t epoch) const {
  double lr = lr_initial;
  for (std::int64_t m : resolved_milestones()) {
    if (m <= epoch) lr *= lr_factor;
  }
  return lr;
}

void sgd_step(ParamStore& store, std::vector<Tensor>& momentum_buffers, double lr,
              double momentum, double weight_decay) {
  const std::vector<ParamRef> refs = store.refs();
  if (momentum_buffers.empty()) {
    momentum_buffers.reserve(refs.size());
    for (const ParamRef ref : refs) {
      momentum_buffers.push_back(Tensor::zeros(store.value(ref).shape()));
    }
  }
  if (momentum_buffers.size() != refs.size()) {
    throw ValueError("momentum buffer count does not match the parameter store");
  }
  for (const ParamRef ref : refs) {
    if (!store.trainable(ref)) continue;
    Tensor& theta = store.value(ref);
    const Tensor& g = store.grad(ref);
    Tensor& v = momentum_buffers[ref.index];
    double* vd = v.data();
    double* td = theta.data();
    const double* gd = g.data();
    for (std::int64_t i = 0; i < theta.size(); ++i) {
      if (!std::isfinite(gd[i])) {
        throw NumericError("non-finite gradient in parameter " + store.name(ref) +
                           " at flat index " + std::to_string(i));
      }
      vd[i] = momentum * vd[i] + gd[i] + weight_decay * td[i];
      td[i] -= lr * vd[i];
    }
  }
  store.zero_grads();
}

namespace {

void count_correct(const Tensor& logits, const std::vector<std::int64_t>& labels,
                   std::int64_t& correct) {
  const std::int64_t batch = logits.extent(0);
  const std::int64_t classes = logits.extent(1);
  const double* ld = logits.data();
  for (std::int64_t r = 0; r < batch; ++r) {
    const double* row = ld + r * classes;
    std::int64_t arg = 0;
    for (std::int64_t c = 1; c < classes; ++c) {
      if (row[c] > row[arg]) arg = c;  // ties resolve to the lowest index
    }
    if (arg == labels[static_cast<std::size_t>(r)]) ++correct;
  }
}

std::vector<std::int64_t> identity_permutation(std::int64_t n) {
  std::vector<std::int64_t> p(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
  return p;
}

}  // namespace

std::vector<double> evaluate_all(FlexibleModel& model, const Dataset& dataset,
                                 std::int64_t batch_size) {
  dataset.validate();
  const std::int64_t n_sub = model.n();
  std::vector<std::int64_t> correct(static_cast<std::size_t>(n_sub), 0);
  const std::vector<std::int64_t> order = identity_permutation(dataset.size());
  for (std::int64_t begin = 0; begin < dataset.size(); begin += batch_size) {
    const std::int64_t end = std::min(dataset.size(), begin + batch_size);
    const Tensor x = gather_inputs(dataset, order, begin, end);
    const std::vector<std::int64_t> labels = gather_labels(dataset, order, begin, end);
    const std::vector<Tensor> logits = model.forward_all(x, Mode::kEval);
    for (std::int64_t i = 0; i < n_sub; ++i) {
      count_correct(logits[static_cast<std::size_t>(i)], labels,
                    correct[static_cast<std::size_t>(i)]);
    }
  }
  std::vector<double> acc(static_cast<std::size_t>(n_sub), 0.0);
  for (std::int64_t i = 0; i < n_sub; ++i) {
    acc[static_cast<std::size_t>(i)] =
        static_cast<double>(correct[static_cast<std::size_t>(i)]) /
        static_cast<double>(dataset.size());
  }
  return acc;
}

double evaluate_one(FlexibleModel& model, const Dataset& dataset, std::int64_t i,
                    std::int64_t batch_size) {
  dataset.validate();
  std::int64_t correct = 0;
  const std::vector<std::int64_t> order = identity_permutation(dataset.size());
  for (std::int64_t begin = 0; begin < dataset.size(); begin += batch_size) {
    const std::int64_t end = std::min(dataset.size(), begin + batch_size);
    const Tensor x = gather_inputs(dataset, order, begin, end);
    const std::vector<std::int64_t> labels = gather_labels(dataset, order, begin, end);
    const Tensor logits = model.forward_one(x, i, Mode::kEval);
    count_correct(logits, labels, correct);
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

TrainResult train(FlexibleModel& model, const Dataset& train_set, const Dataset& val_set,
                  const TrainConfig& cfg) {
  cfg.validate();
  train_set.validate();
  val_set.validate();
  if (train_set.class_count != model.config().classes ||
      val_set.class_count != model.config().classes) {
    throw ConfigError("dataset class count does not match the model head (" +
                      std::to_string(train_set.class_count) + " vs " +
                      std::to_string(model.config().classes) + ")");
  }

  const BatchPlan plan(train_set.size(), cfg.batch_size, cfg.drop_last,
                       RngState::mix(cfg.seed, 101));
  // Train-mode batch statistics need at least two samples per batch.
  for (const auto& [begin, end] : plan.batch_ranges()) {
    if (end - begin < 2) {
      throw ConfigError("batch of size " + std::to_string(end - begin) +
                        " is too small for batch-norm training; adjust batch_size or set "
                        "drop_last");
    }
  }

  const std::vector<std::string> term_names =
      loss_term_names(cfg.distill.strategy, model.n());

  TrainResult result;
  std::vector<Tensor> momentum_buffers;
  for (std::int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    const std::vector<std::int64_t> perm = plan.epoch_permutation(epoch);

    std::vector<double> term_sums(term_names.size(), 0.0);
    double total_sum = 0.0;
    std::int64_t batches = 0;
    for (const auto& [begin, end] : plan.batch_ranges()) {
      const Tensor x = gather_inputs(train_set, perm, begin, end);
      const std::vector<std::int64_t> labels = gather_labels(train_set, perm, begin, end);
      LogitsBundle bundle;
      bundle.logits = model.forward_all(x, Mode::kTrain);
      bundle.labels = one_hot(labels, train_set.class_count);
      const FlexibleLossResult loss = flexible_loss(bundle, cfg.distill);
      if (!std::isfinite(loss.total)) {
        throw NumericError("training loss is not finite at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batches + 1));
      }
      model.backward_all(loss.logit_grads);
      sgd_step(model.store(), momentum_buffers, lr, cfg.momentum, cfg.weight_decay);
      for (std::size_t t = 0; t < loss.terms.size(); ++t) {
        term_sums[t] += loss.terms[t].value;
      }
      total_sum += loss.total;
      ++batches;
    }

    if (epoch % cfg.eval_every == 0) {
      EpochRecord rec;
      rec.epoch = epoch;
      rec.lr = lr;
      rec.accuracy = evaluate_all(model, val_set);
      double sum = 0.0;
      for (double a : rec.accuracy) sum += a;
      rec.avg_accuracy = sum / static_cast<double>(rec.accuracy.size());
      for (std::size_t t = 0; t < term_names.size(); ++t) {
        rec.mean_terms.push_back(
            LossTerm{term_names[t], term_sums[t] / static_cast<double>(batches), 0.0});
      }
      rec.mean_total_loss = total_sum / static_cast<double>(batches);
      result.history.push_back(rec);

      if (rec.avg_accuracy > result.best.avg_accuracy) {
        result.best.epoch = epoch;
        result.best.avg_accuracy = rec.avg_accuracy;
        result.best.accuracy = rec.accuracy;
        result.best.values = model.store().snapshot_values();
      }
    }
  }
  return result;
}

}  // namespace flexkd
