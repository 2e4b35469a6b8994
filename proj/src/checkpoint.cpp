#include "flexkd/checkpoint.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>

#include "flexkd/errors.hpp"

namespace flexkd {

namespace {

constexpr const char* kFormatName = "flexkd-checkpoint";
constexpr int kFormatVersion = 1;

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw FormatError("cannot open checkpoint: " + path);
  }
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint " + path + " is not valid JSON: " + e.what());
  }
  if (!doc.is_object() || doc.value("format", "") != kFormatName) {
    throw FormatError("checkpoint " + path + " has an unknown format tag");
  }
  return doc;
}

}  // namespace

std::string double_to_hex(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%a", v);
  return std::string(buf);
}

double hex_to_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || s.empty()) {
    throw FormatError("bad hex-float value '" + s + "' in checkpoint");
  }
  return v;
}

void save_checkpoint(const ParamStore& store, const std::string& path,
                     const nlohmann::json& meta) {
  nlohmann::json doc;
  doc["format"] = kFormatName;
  doc["version"] = kFormatVersion;
  doc["meta"] = meta;
  nlohmann::json params = nlohmann::json::array();
  for (const ParamRef ref : store.refs()) {
    nlohmann::json p;
    p["name"] = store.name(ref);
    p["shape"] = store.value(ref).shape();
    p["trainable"] = store.trainable(ref);
    nlohmann::json values = nlohmann::json::array();
    const Tensor& t = store.value(ref);
    for (std::int64_t i = 0; i < t.size(); ++i) {
      values.push_back(double_to_hex(t.data()[i]));
    }
    p["values"] = std::move(values);
    params.push_back(std::move(p));
  }
  doc["params"] = std::move(params);

  std::ofstream out(path);
  if (!out) {
    throw FormatError("cannot open checkpoint for writing: " + path);
  }
  out << doc.dump(1) << "\n";
}

nlohmann::json checkpoint_meta(const std::string& path) {
  return read_json(path).value("meta", nlohmann::json::object());
}

void load_checkpoint(ParamStore& store, const std::string& path) {
  const nlohmann::json doc = read_json(path);
  if (!doc.contains("params") || !doc["params"].is_array()) {
    throw FormatError("checkpoint " + path + " has no params array");
  }
  const auto& params = doc["params"];
  if (params.size() != store.count()) {
    throw FormatError("checkpoint " + path + " holds " + std::to_string(params.size()) +
                      " parameters, model expects " + std::to_string(store.count()));
  }
  for (const auto& p : params) {
    const std::string name = p.value("name", "");
    const ParamRef ref = store.find(name);
    if (!ref.valid()) {
      throw FormatError("checkpoint parameter '" + name + "' does not exist in the model");
    }
    const std::vector<std::int64_t> shape = p.value("shape", std::vector<std::int64_t>{});
    Tensor& target = store.value(ref);
    if (shape != target.shape()) {
      throw FormatError("checkpoint parameter '" + name + "' has shape " + shape_str(shape) +
                        ", model expects " + shape_str(target.shape()));
    }
    const auto& values = p.at("values");
    if (!values.is_array() || static_cast<std::int64_t>(values.size()) != target.size()) {
      throw FormatError("checkpoint parameter '" + name + "' has " +
                        std::to_string(values.size()) + " values, expected " +
                        std::to_string(target.size()));
    }
    for (std::int64_t i = 0; i < target.size(); ++i) {
      target.data()[i] = hex_to_double(values[static_cast<std::size_t>(i)].get<std::string>());
    }
  }
}

}  // namespace flexkd
