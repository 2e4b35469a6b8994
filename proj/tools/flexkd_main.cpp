#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "flexkd/errors.hpp"
#include "flexkd/runner.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

std::vector<flexkd::Strategy> parse_strategies(const std::vector<std::string>& names) {
  std::vector<flexkd::Strategy> out;
  for (const std::string& name : names) {
    out.push_back(flexkd::strategy_from_string(name));
  }
  return out;
}

struct LoadedConfig {
  flexkd::RunConfig cfg;
};

// Config loading failures exit with kExitConfig; anything after that is a
// runtime error (kExitRuntime).
LoadedConfig load_or_exit(const std::string& path, const std::string& out_override,
                          std::int64_t seed_override, bool has_seed) {
  try {
    flexkd::RunConfig cfg = flexkd::load_run_config(path);
    if (!out_override.empty()) cfg.out_dir = out_override;
    if (has_seed) cfg.train.seed = static_cast<std::uint64_t>(seed_override);
    cfg.validate();
    return LoadedConfig{std::move(cfg)};
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    std::exit(kExitConfig);
  }
}

int cmd_train(const std::string& config_path, const std::string& out_override,
              std::int64_t seed_override, bool has_seed) {
  const LoadedConfig loaded = load_or_exit(config_path, out_override, seed_override, has_seed);
  try {
    const flexkd::TrainRunOutput out = flexkd::run_train(loaded.cfg);
    if (out.result.best.epoch < 0) {
      std::cout << "no evaluated epochs; nothing to report\n";
      return kExitOk;
    }
    std::cout << "best epoch " << out.result.best.epoch << " (avg accuracy "
              << flexkd::format_g6(out.result.best.avg_accuracy) << ")\n";
    for (std::size_t i = 0; i < out.result.best.accuracy.size(); ++i) {
      std::cout << "  " << out.label << i + 1 << ": "
                << flexkd::format_g6(out.result.best.accuracy[i]) << " ("
                << out.param_counts[i] << " params)\n";
    }
    std::cout << "wrote " << out.metrics_path << ", " << out.checkpoint_path << ", "
              << out.resolved_config_path << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

int cmd_compare(const std::string& config_path, const std::string& out_override,
                const std::vector<std::string>& strategy_names,
                const std::vector<std::uint64_t>& seeds) {
  const LoadedConfig loaded = load_or_exit(config_path, out_override, 0, false);
  flexkd::CompareOptions options;
  try {
    options.strategies = parse_strategies(strategy_names);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  options.seeds = seeds;
  try {
    const flexkd::CompareOutput out = flexkd::run_compare(loaded.cfg, options);
    std::cout << "wrote " << out.comparison_path << "\n";
    for (std::size_t r = 0; r < out.table.row_names.size(); ++r) {
      std::cout << out.table.row_names[r] << ":";
      for (std::size_t c = 0; c < out.table.strategies.size(); ++c) {
        std::cout << "  " << flexkd::to_string(out.table.strategies[c]) << "="
                  << flexkd::format_g6(out.table.cells[r][c].mean) << "±"
                  << flexkd::format_g6(out.table.cells[r][c].stddev);
      }
      std::cout << "  best=" << out.table.best[r] << "\n";
    }
    if (out.has_direction) {
      std::cout << "TAM avg " << flexkd::format_g6(out.tam_avg) << " vs NONE avg "
                << flexkd::format_g6(out.none_avg) << ": TAM >= NONE is "
                << (out.tam_at_least_none ? "true" : "false") << "\n";
    }
    return kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

int cmd_gradcheck(const std::string& config_path) {
  const LoadedConfig loaded = load_or_exit(config_path, "", 0, false);
  try {
    const auto runs = flexkd::run_gradcheck(loaded.cfg, std::cout);
    bool ok = true;
    for (const auto& run : runs) {
      ok = ok && run.report.max_relative_error < 1e-4;
    }
    std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << "\n";
    return ok ? kExitOk : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

int cmd_eval(const std::string& ckpt, const std::string& config_path,
             const std::string& sub_model, bool json_output) {
  flexkd::EvalOptions options;
  options.checkpoint_path = ckpt;
  options.config_path = config_path;
  options.json_output = json_output;
  if (sub_model != "all") {
    try {
      options.sub_model = std::stoll(sub_model);
    } catch (const std::exception&) {
      std::cerr << "config error: --sub-model must be 'all' or a 1-based index\n";
      return kExitConfig;
    }
  }
  try {
    return flexkd::run_eval(options, std::cout);
  } catch (const flexkd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flexkd: joint training of flexible (multi-sub-model) networks with inplace "
               "distillation strategies"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::int64_t seed = 0;

  CLI::App* train = app.add_subcommand("train", "train one model from a run config");
  train->add_option("--config", config_path, "run config JSON")->required();
  train->add_option("--out", out_dir, "output directory override");
  train->add_option("--seed", seed, "train seed override");

  std::vector<std::string> strategy_names = {"NONE", "IPKD", "TA1", "TAM"};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  CLI::App* compare =
      app.add_subcommand("compare", "train a strategy/seed grid and tabulate best accuracies");
  compare->add_option("--config", config_path, "run config JSON")->required();
  compare->add_option("--out", out_dir, "output directory override");
  compare->add_option("--strategies", strategy_names, "strategies to compare");
  compare->add_option("--seeds", seeds, "seeds to average over");

  CLI::App* gradcheck = app.add_subcommand(
      "gradcheck", "finite-difference check of every strategy's loss on a tiny model");
  gradcheck->add_option("--config", config_path, "run config JSON")->required();

  std::string ckpt;
  std::string sub_model = "all";
  bool json_output = false;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on its validation split");
  eval->add_option("--ckpt", ckpt, "checkpoint path")->required();
  eval->add_option("--config", config_path,
                   "resolved config (defaults to config.resolved.json beside the checkpoint)");
  eval->add_option("--sub-model", sub_model, "'all' or a 1-based sub-model index");
  eval->add_flag("--json", json_output, "emit JSON instead of text");

  CLI11_PARSE(app, argc, argv);

  if (train->parsed()) return cmd_train(config_path, out_dir, seed, train->count("--seed") > 0);
  if (compare->parsed()) return cmd_compare(config_path, out_dir, strategy_names, seeds);
  if (gradcheck->parsed()) return cmd_gradcheck(config_path);
  return cmd_eval(ckpt, config_path, sub_model, json_output);
}
