#pragma once

#include <string>
#include <utility>

#include "json.hpp"

#include "flexkd/data.hpp"
#include "flexkd/models.hpp"
#include "flexkd/trainer.hpp"

namespace flexkd {

/// Where the samples come from and how they are split/normalized.
struct DataConfig {
  std::string source = "synthetic";  // synthetic | synthetic_images | idx | csv

  // synthetic 2-D points
  std::string kind = "spirals";  // blobs | spirals
  std::int64_t classes = 3;
  std::int64_t n_per_class = 1000;
  double noise = 0.15;
  std::uint64_t seed = 7;

  // synthetic_images
  std::int64_t image_classes = 10;
  std::int64_t image_n_per_class = 400;
  std::int64_t height = 10;
  std::int64_t width = 10;
  double image_noise = 0.12;
  std::uint64_t image_seed = 7;

  // idx
  std::string images_path;
  std::string labels_path;

  // csv
  std::string csv_path;
  std::string label_column = "label";
  std::int64_t csv_classes = -1;

  double val_fraction = 0.2;
  std::uint64_t split_seed = 1;
  bool normalize = true;

  void validate() const;
};

/// Full run description: model, data, training (with the distillation
/// section), and where outputs go. Parsing rejects unknown keys.
struct RunConfig {
  ModelConfig model;
  DataConfig data;
  TrainConfig train;
  std::string out_dir = "runs/out";

  void validate() const;
};

RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::string& path);

/// Fully materialized config (every default spelled out, lr milestones
/// resolved) so a run is reproducible from its output directory alone.
nlohmann::json resolved_json(const RunConfig& cfg);

/// Builds the configured dataset, then the seeded (train, val) split with
/// train-fitted normalization applied to both parts.
Dataset build_dataset(const DataConfig& cfg);
std::pair<Dataset, Dataset> build_splits(const DataConfig& cfg);

}  // namespace flexkd
