#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flexkd/losses.hpp"
#include "flexkd/trainer.hpp"

namespace flexkd {

/// Floats in CSV output carry 6 significant digits.
std::string format_g6(double v);
/// format_g6 round trip: the value a reader of the CSV would see.
double round_g6(double v);

/// metrics.csv: one row per evaluated epoch with columns
///   run_id,strategy,seed,epoch,<label>1..n,avg,<term columns>,lr
/// RFC-4180 (CRLF line endings), stable header for a given strategy and n.
void write_metrics_csv(const std::string& path, const std::string& run_id, Strategy strategy,
                       std::uint64_t seed, const std::string& label,
                       const std::vector<std::string>& term_names, const TrainResult& result);

/// Best-epoch accuracies of one (strategy, seed) training cell.
struct ComparisonEntry {
  Strategy strategy = Strategy::kNone;
  std::uint64_t seed = 0;
  std::vector<double> accuracy;  // per sub-model at the best epoch
};

/// Per-sub-model rows plus an Avg row; one column per strategy holding
/// mean +/- std over seeds; per-row best strategy.
struct ComparisonTable {
  struct Cell {
    double mean = 0.0;
    double stddev = 0.0;
  };

  std::vector<std::string> row_names;  // exit1..n / switch1..n, then "Avg"
  std::vector<Strategy> strategies;
  std::vector<std::vector<Cell>> cells;  // [row][strategy]
  std::vector<std::string> best;         // per row

  const Cell& cell(const std::string& row, Strategy s) const;
};

/// Cell means are rounded to the printed precision before averaging, so the
/// Avg row recomputes exactly from the printed sub-model rows. The std is the
/// sample standard deviation over seeds (0 for a single seed).
ComparisonTable build_comparison(const std::vector<ComparisonEntry>& entries,
                                 const std::vector<Strategy>& strategies, std::int64_t n_sub,
                                 const std::string& label);

/// comparison.csv: header `sub_model,<S1>,<S2>,...,best`, cells "mean±std".
void write_comparison_csv(const std::string& path, const ComparisonTable& table);

}  // namespace flexkd
