#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "flexkd/config.hpp"
#include "flexkd/report.hpp"

namespace flexkd {

/// One full training run from a config: data, model, training, and the three
/// output files (metrics.csv, best.ckpt, config.resolved.json) under
/// cfg.out_dir. The model ends up holding the best-epoch parameters.
struct TrainRunOutput {
  TrainResult result;
  std::string run_id;
  std::string label;  // exit | switch
  std::int64_t n_sub = 0;
  std::vector<std::int64_t> param_counts;  // per sub-model
  std::string metrics_path;
  std::string checkpoint_path;
  std::string resolved_config_path;
};

TrainRunOutput run_train(const RunConfig& cfg);

struct CompareOptions {
  std::vector<Strategy> strategies;
  std::vector<std::uint64_t> seeds;
  /// <= 0 reads FLEXDISTILL_THREADS, falling back to the hardware count.
  int max_threads = 0;
};

struct CompareOutput {
  ComparisonTable table;
  std::string comparison_path;
  /// Directional summary over the Avg row, present when both strategies ran.
  bool has_direction = false;
  double tam_avg = 0.0;
  double none_avg = 0.0;
  bool tam_at_least_none = false;
};

/// Trains every (strategy, seed) cell into out_dir/<strategy>_seed<seed>/ and
/// assembles out_dir/comparison.csv. Cells may run in parallel; results are
/// deterministic regardless of scheduling.
CompareOutput run_compare(const RunConfig& base, const CompareOptions& options);

/// Gradient check of every strategy's joint loss on a shrunken instance of the
/// configured model. Prints one line per strategy; returns the worst error.
struct GradCheckRun {
  Strategy strategy = Strategy::kNone;
  GradCheckReport report;
};

std::vector<GradCheckRun> run_gradcheck(const RunConfig& cfg, std::ostream& out);

struct EvalOptions {
  std::string checkpoint_path;
  std::string config_path;    // resolved config written next to the checkpoint
  std::int64_t sub_model = 0;  // 0 = all
  bool json_output = false;
};

/// Rebuilds the model + validation split from the resolved config, loads the
/// checkpoint, and prints per-sub-model accuracy and parameter counts.
int run_eval(const EvalOptions& options, std::ostream& out);

}  // namespace flexkd
