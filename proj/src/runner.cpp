#include "flexkd/runner.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <ostream>
#include <thread>

#include "flexkd/checkpoint.hpp"
#include "flexkd/errors.hpp"

namespace flexkd {

namespace fs = std::filesystem;

namespace {

// Model parameters are initialized from a stream derived from the train seed,
// decoupled from the shuffle streams.
constexpr std::uint64_t kInitStream = 7;

void check_model_matches_data(const ModelConfig& model, const Dataset& sample) {
  if (model.block == BlockKind::kDense) {
    if (sample.inputs.rank() != 2 || sample.inputs.extent(1) != model.input.features) {
      throw ConfigError("model.input.features=" + std::to_string(model.input.features) +
                        " does not match dataset inputs " + shape_str(sample.inputs.shape()));
    }
  } else {
    if (sample.inputs.rank() != 4 || sample.inputs.extent(1) != model.input.channels ||
        sample.inputs.extent(2) != model.input.height ||
        sample.inputs.extent(3) != model.input.width) {
      throw ConfigError("model.input (channels/height/width) does not match dataset inputs " +
                        shape_str(sample.inputs.shape()));
    }
  }
  if (model.classes != sample.class_count) {
    throw ConfigError("model.classes=" + std::to_string(model.classes) +
                      " does not match dataset class count " +
                      std::to_string(sample.class_count));
  }
}

std::string make_run_id(const RunConfig& cfg) {
  return cfg.model.family + "_" + to_string(cfg.train.distill.strategy) + "_s" +
         std::to_string(cfg.train.seed);
}

}  // namespace

TrainRunOutput run_train(const RunConfig& cfg) {
  cfg.validate();
  auto [train_set, val_set] = build_splits(cfg.data);
  check_model_matches_data(cfg.model, train_set);

  RngState init_rng(RngState::mix(cfg.train.seed, kInitStream));
  std::unique_ptr<FlexibleModel> model = build_model(cfg.model, init_rng);

  TrainRunOutput out;
  out.result = train(*model, train_set, val_set, cfg.train);
  out.run_id = make_run_id(cfg);
  out.label = model->sub_model_label();
  out.n_sub = model->n();
  for (std::int64_t i = 1; i <= model->n(); ++i) {
    out.param_counts.push_back(model->param_count(i));
  }

  fs::create_directories(cfg.out_dir);
  out.metrics_path = (fs::path(cfg.out_dir) / "metrics.csv").string();
  out.checkpoint_path = (fs::path(cfg.out_dir) / "best.ckpt").string();
  out.resolved_config_path = (fs::path(cfg.out_dir) / "config.resolved.json").string();

  write_metrics_csv(out.metrics_path, out.run_id, cfg.train.distill.strategy, cfg.train.seed,
                    out.label, loss_term_names(cfg.train.distill.strategy, model->n()),
                    out.result);

  // The checkpoint carries the best-epoch values; leave the model on them too.
  if (out.result.best.epoch >= 0) {
    model->store().restore_values(out.result.best.values);
  }
  save_checkpoint(model->store(), out.checkpoint_path, resolved_json(cfg));

  std::ofstream resolved(out.resolved_config_path);
  if (!resolved) {
    throw FormatError("cannot write " + out.resolved_config_path);
  }
  resolved << resolved_json(cfg).dump(2) << "\n";
  return out;
}

namespace {

int resolve_thread_cap(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("FLEXDISTILL_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace

CompareOutput run_compare(const RunConfig& base, const CompareOptions& options) {
  if (options.strategies.empty() || options.seeds.empty()) {
    throw ConfigError("compare needs at least one strategy and one seed");
  }
  base.validate();

  struct Cell {
    Strategy strategy;
    std::uint64_t seed;
    RunConfig cfg;
  };
  std::vector<Cell> cells;
  for (const Strategy s : options.strategies) {
    for (const std::uint64_t seed : options.seeds) {
      RunConfig cfg = base;
      cfg.train.distill.strategy = s;
      cfg.train.seed = seed;
      cfg.out_dir = (fs::path(base.out_dir) /
                     (to_string(s) + "_seed" + std::to_string(seed))).string();
      cells.push_back(Cell{s, seed, std::move(cfg)});
    }
  }

  const int cap = std::max(1, std::min<int>(resolve_thread_cap(options.max_threads),
                                            static_cast<int>(cells.size())));
  std::vector<ComparisonEntry> entries(cells.size());
  std::vector<std::string> failures;
  std::mutex failures_mutex;
  std::size_t next = 0;
  std::mutex next_mutex;

  auto worker = [&]() {
    for (;;) {
      std::size_t idx;
      {
        std::lock_guard<std::mutex> lock(next_mutex);
        if (next >= cells.size()) return;
        idx = next++;
      }
      try {
        const TrainRunOutput out = run_train(cells[idx].cfg);
        entries[idx] = ComparisonEntry{cells[idx].strategy, cells[idx].seed,
                                       out.result.best.accuracy};
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(failures_mutex);
        failures.push_back(to_string(cells[idx].strategy) + "_seed" +
                           std::to_string(cells[idx].seed) + ": " + e.what());
      }
    }
  };

  if (cap == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(cap));
    for (int t = 0; t < cap; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  if (!failures.empty()) {
    std::string msg = "compare cells failed:";
    for (const std::string& f : failures) msg += "\n  " + f;
    throw NumericError(msg);
  }

  const std::int64_t n_sub = base.model.n_sub_models();
  const std::string label = base.model.family == "slimmable" ? "switch" : "exit";

  CompareOutput out;
  out.table = build_comparison(entries, options.strategies, n_sub, label);
  fs::create_directories(base.out_dir);
  out.comparison_path = (fs::path(base.out_dir) / "comparison.csv").string();
  write_comparison_csv(out.comparison_path, out.table);

  const bool has_tam = std::find(options.strategies.begin(), options.strategies.end(),
                                 Strategy::kTaM) != options.strategies.end();
  const bool has_none = std::find(options.strategies.begin(), options.strategies.end(),
                                  Strategy::kNone) != options.strategies.end();
  if (has_tam && has_none) {
    out.has_direction = true;
    out.tam_avg = out.table.cell("Avg", Strategy::kTaM).mean;
    out.none_avg = out.table.cell("Avg", Strategy::kNone).mean;
    out.tam_at_least_none = out.tam_avg >= out.none_avg;
  }
  return out;
}

namespace {

// Shrinks a configured architecture to a few units per block so the
// finite-difference sweep stays fast while preserving family, block kind,
// depth and sub-model count.
ModelConfig tiny_model_config(const ModelConfig& base) {
  ModelConfig tiny = base;
  for (std::int64_t& b : tiny.blocks) b = std::min<std::int64_t>(b, 4);
  tiny.classes = std::min<std::int64_t>(base.classes, 4);
  if (tiny.block == BlockKind::kDense) {
    tiny.input.features = std::min<std::int64_t>(base.input.features, 4);
  } else {
    tiny.input.channels = std::min<std::int64_t>(base.input.channels, 2);
    tiny.input.height = std::min<std::int64_t>(base.input.height, 6);
    tiny.input.width = std::min<std::int64_t>(base.input.width, 6);
  }
  return tiny;
}

}  // namespace

std::vector<GradCheckRun> run_gradcheck(const RunConfig& cfg, std::ostream& out) {
  cfg.validate();
  const ModelConfig tiny = tiny_model_config(cfg.model);

  RngState rng(RngState::mix(cfg.train.seed, kInitStream));
  std::unique_ptr<FlexibleModel> model = build_model(tiny, rng);

  const std::int64_t batch = 3;
  RngState data_rng(RngState::mix(cfg.train.seed, 55));
  Tensor input;
  if (tiny.block == BlockKind::kDense) {
    input = rand_normal(data_rng, {batch, tiny.input.features}, 0.0, 1.0);
  } else {
    input = rand_normal(
        data_rng, {batch, tiny.input.channels, tiny.input.height, tiny.input.width}, 0.0, 1.0);
  }
  std::vector<std::int64_t> labels;
  for (std::int64_t r = 0; r < batch; ++r) {
    labels.push_back(static_cast<std::int64_t>(data_rng.next_below(
        static_cast<std::uint64_t>(tiny.classes))));
  }
  const Tensor onehot = one_hot(labels, tiny.classes);

  std::vector<Strategy> strategies = {Strategy::kNone};
  if (model->n() >= 2) {
    strategies.insert(strategies.end(), {Strategy::kIpkd, Strategy::kTa1, Strategy::kTaM});
  }

  std::vector<GradCheckRun> runs;
  for (const Strategy strategy : strategies) {
    DistillConfig distill = cfg.train.distill;
    distill.strategy = strategy;
    auto loss_fn = [&](ParamStore&) {
      LogitsBundle bundle;
      bundle.logits = model->forward_all(input, Mode::kTrain);
      bundle.labels = onehot;
      const FlexibleLossResult loss = flexible_loss(bundle, distill);
      model->backward_all(loss.logit_grads);
      return loss.total;
    };
    GradCheckRun run;
    run.strategy = strategy;
    run.report = grad_check_report(loss_fn, model->store());
    out << to_string(strategy) << ": max relative error " << run.report.max_relative_error;
    if (!run.report.worst_param.empty()) {
      out << " (worst " << run.report.worst_param << "[" << run.report.worst_flat_index
          << "] analytic=" << run.report.worst_analytic
          << " numeric=" << run.report.worst_numeric << ")";
    }
    out << "\n";
    runs.push_back(std::move(run));
  }
  return runs;
}

int run_eval(const EvalOptions& options, std::ostream& out) {
  std::string config_path = options.config_path;
  if (config_path.empty()) {
    config_path = (fs::path(options.checkpoint_path).parent_path() /
                   "config.resolved.json").string();
  }
  const RunConfig cfg = load_run_config(config_path);
  auto [train_set, val_set] = build_splits(cfg.data);
  check_model_matches_data(cfg.model, val_set);

  RngState rng(RngState::mix(cfg.train.seed, kInitStream));
  std::unique_ptr<FlexibleModel> model = build_model(cfg.model, rng);
  load_checkpoint(model->store(), options.checkpoint_path);

  const std::string label = model->sub_model_label();
  nlohmann::json doc;
  doc["checkpoint"] = options.checkpoint_path;
  nlohmann::json rows = nlohmann::json::array();

  auto emit = [&](std::int64_t i, double acc) {
    nlohmann::json row;
    row["sub_model"] = label + std::to_string(i);
    row["accuracy"] = acc;
    row["param_count"] = model->param_count(i);
    rows.push_back(row);
    if (!options.json_output) {
      out << label << i << ": accuracy " << format_g6(acc) << ", params "
          << model->param_count(i) << "\n";
    }
  };

  if (options.sub_model > 0) {
    emit(options.sub_model, evaluate_one(*model, val_set, options.sub_model));
  } else {
    const std::vector<double> accs = evaluate_all(*model, val_set);
    for (std::int64_t i = 1; i <= model->n(); ++i) {
      emit(i, accs[static_cast<std::size_t>(i - 1)]);
    }
  }
  doc["results"] = rows;
  if (options.json_output) {
    out << doc.dump(2) << "\n";
  }
  return 0;
}

}  // namespace flexkd
