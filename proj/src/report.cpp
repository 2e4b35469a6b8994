#include "flexkd/report.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>

#include "flexkd/errors.hpp"

namespace flexkd {

std::string format_g6(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return std::string(buf);
}

double round_g6(double v) { return std::strtod(format_g6(v).c_str(), nullptr); }

namespace {

constexpr const char* kCrlf = "\r\n";

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);  // binary keeps the CRLF endings exact
  if (!out) {
    throw FormatError("cannot open for writing: " + path);
  }
  return out;
}

}  // namespace

void write_metrics_csv(const std::string& path, const std::string& run_id, Strategy strategy,
                       std::uint64_t seed, const std::string& label,
                       const std::vector<std::string>& term_names, const TrainResult& result) {
  std::ofstream out = open_out(path);
  const std::size_t n_sub = result.history.empty() ? 0 : result.history.front().accuracy.size();
  out << "run_id,strategy,seed,epoch";
  for (std::size_t i = 1; i <= n_sub; ++i) out << "," << label << i;
  out << ",avg";
  for (const std::string& t : term_names) out << "," << t;
  out << ",lr" << kCrlf;
  for (const EpochRecord& rec : result.history) {
    out << run_id << "," << to_string(strategy) << "," << seed << "," << rec.epoch;
    for (const double a : rec.accuracy) out << "," << format_g6(a);
    out << "," << format_g6(rec.avg_accuracy);
    for (const LossTerm& t : rec.mean_terms) out << "," << format_g6(t.value);
    out << "," << format_g6(rec.lr) << kCrlf;
  }
}

const ComparisonTable::Cell& ComparisonTable::cell(const std::string& row, Strategy s) const {
  for (std::size_t r = 0; r < row_names.size(); ++r) {
    if (row_names[r] != row) continue;
    for (std::size_t c = 0; c < strategies.size(); ++c) {
      if (strategies[c] == s) return cells[r][c];
    }
  }
  throw ValueError("comparison table has no cell (" + row + ", " + to_string(s) + ")");
}

ComparisonTable build_comparison(const std::vector<ComparisonEntry>& entries,
                                 const std::vector<Strategy>& strategies, std::int64_t n_sub,
                                 const std::string& label) {
  if (strategies.empty() || n_sub < 1) {
    throw ValueError("comparison needs at least one strategy and one sub-model");
  }
  ComparisonTable table;
  table.strategies = strategies;
  for (std::int64_t i = 1; i <= n_sub; ++i) {
    table.row_names.push_back(label + std::to_string(i));
  }
  table.row_names.push_back("Avg");
  table.cells.assign(table.row_names.size(),
                     std::vector<ComparisonTable::Cell>(strategies.size()));

  for (std::size_t c = 0; c < strategies.size(); ++c) {
    std::vector<std::vector<double>> per_sub(static_cast<std::size_t>(n_sub));
    for (const ComparisonEntry& e : entries) {
      if (e.strategy != strategies[c]) continue;
      if (static_cast<std::int64_t>(e.accuracy.size()) != n_sub) {
        throw ValueError("comparison entry has " + std::to_string(e.accuracy.size()) +
                         " sub-models, expected " + std::to_string(n_sub));
      }
      for (std::int64_t i = 0; i < n_sub; ++i) {
        per_sub[static_cast<std::size_t>(i)].push_back(e.accuracy[static_cast<std::size_t>(i)]);
      }
    }
    if (per_sub[0].empty()) {
      throw ValueError("no runs recorded for strategy " + to_string(strategies[c]));
    }
    auto mean_std = [](const std::vector<double>& xs) {
      double m = 0.0;
      for (double x : xs) m += x;
      m /= static_cast<double>(xs.size());
      double var = 0.0;
      for (double x : xs) var += (x - m) * (x - m);
      const double sd = xs.size() > 1 ? std::sqrt(var / static_cast<double>(xs.size() - 1)) : 0.0;
      return ComparisonTable::Cell{m, sd};
    };

    double avg_mean_acc = 0.0;
    std::vector<double> per_seed_avg(per_sub[0].size(), 0.0);
    for (std::int64_t i = 0; i < n_sub; ++i) {
      ComparisonTable::Cell cell = mean_std(per_sub[static_cast<std::size_t>(i)]);
      cell.mean = round_g6(cell.mean);
      table.cells[static_cast<std::size_t>(i)][c] = cell;
      avg_mean_acc += cell.mean;
      for (std::size_t s = 0; s < per_seed_avg.size(); ++s) {
        per_seed_avg[s] += per_sub[static_cast<std::size_t>(i)][s];
      }
    }
    for (double& v : per_seed_avg) v /= static_cast<double>(n_sub);
    ComparisonTable::Cell avg_cell = mean_std(per_seed_avg);
    // The Avg mean recomputes exactly from the printed per-sub-model means.
    avg_cell.mean = round_g6(avg_mean_acc / static_cast<double>(n_sub));
    table.cells.back()[c] = avg_cell;
  }

  for (std::size_t r = 0; r < table.row_names.size(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < strategies.size(); ++c) {
      if (table.cells[r][c].mean > table.cells[r][best].mean) best = c;
    }
    table.best.push_back(to_string(strategies[best]));
  }
  return table;
}

void write_comparison_csv(const std::string& path, const ComparisonTable& table) {
  std::ofstream out = open_out(path);
  out << "sub_model";
  for (const Strategy s : table.strategies) out << "," << to_string(s);
  out << ",best" << kCrlf;
  for (std::size_t r = 0; r < table.row_names.size(); ++r) {
    out << table.row_names[r];
    for (std::size_t c = 0; c < table.strategies.size(); ++c) {
      const auto& cell = table.cells[r][c];
      out << "," << format_g6(cell.mean) << "\xC2\xB1" << format_g6(cell.stddev);
    }
    out << "," << table.best[r] << kCrlf;
  }
}

}  // namespace flexkd
