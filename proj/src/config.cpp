#include "flexkd/config.hpp"

#include <fstream>
#include <set>

#include "flexkd/errors.hpp"

namespace flexkd {

namespace {

using nlohmann::json;

void check_keys(const json& obj, const std::set<std::string>& allowed,
                const std::string& section) {
  if (!obj.is_object()) {
    throw ConfigError("section '" + section + "' must be a JSON object");
  }
  for (const auto& [key, value] : obj.items()) {
    if (allowed.count(key) == 0) {
      throw ConfigError("unknown key '" + key + "' in section '" + section + "'");
    }
  }
}

template <typename T>
T get_or(const json& obj, const std::string& key, const T& fallback, const std::string& section) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("key '" + section + "." + key + "' has the wrong type");
  }
}

ModelConfig parse_model(const json& obj) {
  check_keys(obj,
             {"family", "block", "classes", "input", "blocks", "widths", "shared_bn_affine",
              "bn_momentum", "bn_epsilon"},
             "model");
  ModelConfig m;
  m.family = get_or<std::string>(obj, "family", "early_exit", "model");
  const std::string block = get_or<std::string>(obj, "block", "dense", "model");
  if (block == "dense") {
    m.block = BlockKind::kDense;
  } else if (block == "conv") {
    m.block = BlockKind::kConv;
  } else {
    throw ConfigError("model.block must be 'dense' or 'conv', got '" + block + "'");
  }
  m.classes = get_or<std::int64_t>(obj, "classes", 0, "model");
  if (obj.contains("input")) {
    const json& in = obj.at("input");
    check_keys(in, {"features", "channels", "height", "width"}, "model.input");
    m.input.features = get_or<std::int64_t>(in, "features", 0, "model.input");
    m.input.channels = get_or<std::int64_t>(in, "channels", 0, "model.input");
    m.input.height = get_or<std::int64_t>(in, "height", 0, "model.input");
    m.input.width = get_or<std::int64_t>(in, "width", 0, "model.input");
  }
  m.blocks = get_or<std::vector<std::int64_t>>(obj, "blocks", {}, "model");
  m.widths = get_or<std::vector<double>>(obj, "widths", {}, "model");
  m.shared_bn_affine = get_or<bool>(obj, "shared_bn_affine", false, "model");
  m.bn_momentum = get_or<double>(obj, "bn_momentum", 0.1, "model");
  m.bn_epsilon = get_or<double>(obj, "bn_epsilon", 1e-5, "model");
  return m;
}

DataConfig parse_data(const json& obj) {
  check_keys(obj,
             {"source", "synthetic", "synthetic_images", "idx", "csv", "val_fraction",
              "split_seed", "normalize"},
             "data");
  DataConfig d;
  d.source = get_or<std::string>(obj, "source", "synthetic", "data");
  if (obj.contains("synthetic")) {
    const json& s = obj.at("synthetic");
    check_keys(s, {"kind", "classes", "n_per_class", "noise", "seed"}, "data.synthetic");
    d.kind = get_or<std::string>(s, "kind", d.kind, "data.synthetic");
    d.classes = get_or<std::int64_t>(s, "classes", d.classes, "data.synthetic");
    d.n_per_class = get_or<std::int64_t>(s, "n_per_class", d.n_per_class, "data.synthetic");
    d.noise = get_or<double>(s, "noise", d.noise, "data.synthetic");
    d.seed = get_or<std::uint64_t>(s, "seed", d.seed, "data.synthetic");
  }
  if (obj.contains("synthetic_images")) {
    const json& s = obj.at("synthetic_images");
    check_keys(s, {"classes", "n_per_class", "height", "width", "noise", "seed"},
               "data.synthetic_images");
    d.image_classes = get_or<std::int64_t>(s, "classes", d.image_classes, "data.synthetic_images");
    d.image_n_per_class =
        get_or<std::int64_t>(s, "n_per_class", d.image_n_per_class, "data.synthetic_images");
    d.height = get_or<std::int64_t>(s, "height", d.height, "data.synthetic_images");
    d.width = get_or<std::int64_t>(s, "width", d.width, "data.synthetic_images");
    d.image_noise = get_or<double>(s, "noise", d.image_noise, "data.synthetic_images");
    d.image_seed = get_or<std::uint64_t>(s, "seed", d.image_seed, "data.synthetic_images");
  }
  if (obj.contains("idx")) {
    const json& s = obj.at("idx");
    check_keys(s, {"images", "labels"}, "data.idx");
    d.images_path = get_or<std::string>(s, "images", "", "data.idx");
    d.labels_path = get_or<std::string>(s, "labels", "", "data.idx");
  }
  if (obj.contains("csv")) {
    const json& s = obj.at("csv");
    check_keys(s, {"path", "label_column", "classes"}, "data.csv");
    d.csv_path = get_or<std::string>(s, "path", "", "data.csv");
    d.label_column = get_or<std::string>(s, "label_column", d.label_column, "data.csv");
    d.csv_classes = get_or<std::int64_t>(s, "classes", d.csv_classes, "data.csv");
  }
  d.val_fraction = get_or<double>(obj, "val_fraction", d.val_fraction, "data");
  d.split_seed = get_or<std::uint64_t>(obj, "split_seed", d.split_seed, "data");
  d.normalize = get_or<bool>(obj, "normalize", d.normalize, "data");
  return d;
}

TrainConfig parse_train(const json& obj) {
  check_keys(obj,
             {"epochs", "batch_size", "lr_initial", "momentum", "weight_decay", "lr_milestones",
              "lr_factor", "seed", "eval_every", "drop_last"},
             "train");
  TrainConfig t;
  t.epochs = get_or<std::int64_t>(obj, "epochs", t.epochs, "train");
  t.batch_size = get_or<std::int64_t>(obj, "batch_size", t.batch_size, "train");
  t.lr_initial = get_or<double>(obj, "lr_initial", t.lr_initial, "train");
  t.momentum = get_or<double>(obj, "momentum", t.momentum, "train");
  t.weight_decay = get_or<double>(obj, "weight_decay", t.weight_decay, "train");
  t.lr_milestones = get_or<std::vector<std::int64_t>>(obj, "lr_milestones", {}, "train");
  t.lr_factor = get_or<double>(obj, "lr_factor", t.lr_factor, "train");
  t.seed = get_or<std::uint64_t>(obj, "seed", t.seed, "train");
  t.eval_every = get_or<std::int64_t>(obj, "eval_every", t.eval_every, "train");
  t.drop_last = get_or<bool>(obj, "drop_last", t.drop_last, "train");
  return t;
}

DistillConfig parse_distill(const json& obj) {
  check_keys(obj, {"strategy", "tau", "lambda", "divergence", "detach_teacher", "kl_order"},
             "distill");
  DistillConfig d;
  d.strategy = strategy_from_string(get_or<std::string>(obj, "strategy", "NONE", "distill"));
  d.tau = get_or<double>(obj, "tau", d.tau, "distill");
  d.lambda = get_or<double>(obj, "lambda", d.lambda, "distill");
  d.divergence = divergence_from_string(get_or<std::string>(obj, "divergence", "KL", "distill"));
  d.detach_teacher = get_or<bool>(obj, "detach_teacher", d.detach_teacher, "distill");
  d.kl_order =
      kl_order_from_string(get_or<std::string>(obj, "kl_order", "student_first", "distill"));
  return d;
}

}  // namespace

void DataConfig::validate() const {
  const std::set<std::string> sources = {"synthetic", "synthetic_images", "idx", "csv"};
  if (sources.count(source) == 0) {
    throw ConfigError("data.source must be synthetic, synthetic_images, idx or csv, got '" +
                      source + "'");
  }
  if (source == "synthetic" && kind != "blobs" && kind != "spirals") {
    throw ConfigError("data.synthetic.kind must be 'blobs' or 'spirals', got '" + kind + "'");
  }
  if (source == "idx" && (images_path.empty() || labels_path.empty())) {
    throw ConfigError("data.idx needs both 'images' and 'labels' paths");
  }
  if (source == "csv" && csv_path.empty()) {
    throw ConfigError("data.csv needs a 'path'");
  }
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ConfigError("data.val_fraction must lie strictly inside (0, 1)");
  }
}

void RunConfig::validate() const {
  model.validate();
  data.validate();
  try {
    train.validate();
  } catch (const ValueError& e) {
    throw ConfigError(e.what());
  }
  if (out_dir.empty()) {
    throw ConfigError("out_dir must not be empty");
  }
}

RunConfig parse_run_config(const nlohmann::json& doc) {
  check_keys(doc, {"model", "data", "train", "distill", "out_dir"}, "<top level>");
  RunConfig cfg;
  if (doc.contains("model")) cfg.model = parse_model(doc.at("model"));
  if (doc.contains("data")) cfg.data = parse_data(doc.at("data"));
  if (doc.contains("train")) cfg.train = parse_train(doc.at("train"));
  if (doc.contains("distill")) cfg.train.distill = parse_distill(doc.at("distill"));
  cfg.out_dir = get_or<std::string>(doc, "out_dir", cfg.out_dir, "<top level>");
  try {
    cfg.validate();
  } catch (const ValueError& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open config file: " + path);
  }
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return parse_run_config(doc);
}

nlohmann::json resolved_json(const RunConfig& cfg) {
  nlohmann::json doc;
  nlohmann::json model;
  model["family"] = cfg.model.family;
  model["block"] = cfg.model.block == BlockKind::kDense ? "dense" : "conv";
  model["classes"] = cfg.model.classes;
  nlohmann::json input;
  input["features"] = cfg.model.input.features;
  input["channels"] = cfg.model.input.channels;
  input["height"] = cfg.model.input.height;
  input["width"] = cfg.model.input.width;
  model["input"] = input;
  model["blocks"] = cfg.model.blocks;
  model["widths"] = cfg.model.widths;
  model["shared_bn_affine"] = cfg.model.shared_bn_affine;
  model["bn_momentum"] = cfg.model.bn_momentum;
  model["bn_epsilon"] = cfg.model.bn_epsilon;
  doc["model"] = model;

  nlohmann::json data;
  data["source"] = cfg.data.source;
  data["synthetic"] = {{"kind", cfg.data.kind},
                       {"classes", cfg.data.classes},
                       {"n_per_class", cfg.data.n_per_class},
                       {"noise", cfg.data.noise},
                       {"seed", cfg.data.seed}};
  data["synthetic_images"] = {{"classes", cfg.data.image_classes},
                              {"n_per_class", cfg.data.image_n_per_class},
                              {"height", cfg.data.height},
                              {"width", cfg.data.width},
                              {"noise", cfg.data.image_noise},
                              {"seed", cfg.data.image_seed}};
  data["idx"] = {{"images", cfg.data.images_path}, {"labels", cfg.data.labels_path}};
  data["csv"] = {{"path", cfg.data.csv_path},
                 {"label_column", cfg.data.label_column},
                 {"classes", cfg.data.csv_classes}};
  data["val_fraction"] = cfg.data.val_fraction;
  data["split_seed"] = cfg.data.split_seed;
  data["normalize"] = cfg.data.normalize;
  doc["data"] = data;

  nlohmann::json train;
  train["epochs"] = cfg.train.epochs;
  train["batch_size"] = cfg.train.batch_size;
  train["lr_initial"] = cfg.train.lr_initial;
  train["momentum"] = cfg.train.momentum;
  train["weight_decay"] = cfg.train.weight_decay;
  train["lr_milestones"] = cfg.train.resolved_milestones();
  train["lr_factor"] = cfg.train.lr_factor;
  train["seed"] = cfg.train.seed;
  train["eval_every"] = cfg.train.eval_every;
  train["drop_last"] = cfg.train.drop_last;
  doc["train"] = train;

  nlohmann::json distill;
  distill["strategy"] = to_string(cfg.train.distill.strategy);
  distill["tau"] = cfg.train.distill.tau;
  distill["lambda"] = cfg.train.distill.lambda;
  distill["divergence"] = to_string(cfg.train.distill.divergence);
  distill["detach_teacher"] = cfg.train.distill.detach_teacher;
  distill["kl_order"] = to_string(cfg.train.distill.kl_order);
  doc["distill"] = distill;

  doc["out_dir"] = cfg.out_dir;
  return doc;
}

Dataset build_dataset(const DataConfig& cfg) {
  cfg.validate();
  if (cfg.source == "synthetic") {
    const SyntheticKind kind =
        cfg.kind == "blobs" ? SyntheticKind::kBlobs : SyntheticKind::kSpirals;
    return make_synthetic(kind, cfg.n_per_class, cfg.classes, cfg.noise, cfg.seed);
  }
  if (cfg.source == "synthetic_images") {
    return make_synthetic_images(cfg.image_classes, cfg.image_n_per_class, cfg.height, cfg.width,
                                 cfg.image_noise, cfg.image_seed);
  }
  if (cfg.source == "idx") {
    return load_idx(cfg.images_path, cfg.labels_path);
  }
  return load_csv(cfg.csv_path, cfg.label_column, cfg.csv_classes);
}

std::pair<Dataset, Dataset> build_splits(const DataConfig& cfg) {
  const Dataset full = build_dataset(cfg);
  auto [train, val] = split(full, cfg.val_fraction, cfg.split_seed);
  if (cfg.normalize) {
    const NormStats stats = compute_norm_stats(train);
    apply_normalization(train, stats);
    apply_normalization(val, stats);
  }
  return {std::move(train), std::move(val)};
}

}  // namespace flexkd
