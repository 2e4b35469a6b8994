#include "flexkd/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <sstream>

#include "flexkd/errors.hpp"

namespace flexkd {

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw FormatError("cannot open file: " + path);
  }
  return std::vector<unsigned char>((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset,
                        const std::string& path) {
  if (offset + 4 > buf.size()) {
    throw FormatError(path + ": truncated at byte offset " + std::to_string(buf.size()) +
                      ", expected 32-bit field at offset " + std::to_string(offset));
  }
  return (static_cast<std::uint32_t>(buf[offset]) << 24) |
         (static_cast<std::uint32_t>(buf[offset + 1]) << 16) |
         (static_cast<std::uint32_t>(buf[offset + 2]) << 8) |
         static_cast<std::uint32_t>(buf[offset + 3]);
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  const unsigned char bytes[4] = {static_cast<unsigned char>(v >> 24),
                                  static_cast<unsigned char>(v >> 16),
                                  static_cast<unsigned char>(v >> 8),
                                  static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

}  // namespace

void Dataset::validate() const {
  if (labels.empty()) {
    throw ValueError("dataset must hold at least one sample");
  }
  if (inputs.rank() < 2 || inputs.extent(0) != size()) {
    throw ShapeError("dataset inputs " + shape_str(inputs.shape()) + " do not match " +
                     std::to_string(size()) + " labels");
  }
  if (class_count < 1) {
    throw ValueError("dataset class_count must be positive");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= class_count) {
      throw ValueError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                       " outside [0, " + std::to_string(class_count) + ")");
    }
  }
  if (!inputs.all_finite()) {
    throw ValueError("dataset inputs contain non-finite values");
  }
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const std::vector<unsigned char> img = read_file(images_path);
  const std::uint32_t img_magic = read_be32(img, 0, images_path);
  if (img_magic != kIdxImagesMagic) {
    throw FormatError(images_path + ": bad magic at byte offset 0 (got 0x" +
                      [&] {
                        char buf[16];
                        std::snprintf(buf, sizeof(buf), "%08x", img_magic);
                        return std::string(buf);
                      }() +
                      ", expected 0x00000803)");
  }
  const std::uint32_t count = read_be32(img, 4, images_path);
  const std::uint32_t rows = read_be32(img, 8, images_path);
  const std::uint32_t cols = read_be32(img, 12, images_path);
  const std::size_t expected = 16 + static_cast<std::size_t>(count) * rows * cols;
  if (img.size() < expected) {
    throw FormatError(images_path + ": truncated at byte offset " + std::to_string(img.size()) +
                      ", expected " + std::to_string(expected) + " bytes");
  }

  const std::vector<unsigned char> lab = read_file(labels_path);
  const std::uint32_t lab_magic = read_be32(lab, 0, labels_path);
  if (lab_magic != kIdxLabelsMagic) {
    throw FormatError(labels_path + ": bad magic at byte offset 0 (expected 0x00000801)");
  }
  const std::uint32_t lab_count = read_be32(lab, 4, labels_path);
  if (lab.size() < 8 + static_cast<std::size_t>(lab_count)) {
    throw FormatError(labels_path + ": truncated at byte offset " + std::to_string(lab.size()));
  }
  if (lab_count != count) {
    throw ValueError("IDX image count " + std::to_string(count) + " does not match label count " +
                     std::to_string(lab_count));
  }
  if (count == 0) {
    throw ValueError("IDX files hold zero samples");
  }

  Dataset ds;
  ds.inputs = Tensor({static_cast<std::int64_t>(count), 1, static_cast<std::int64_t>(rows),
                      static_cast<std::int64_t>(cols)});
  double* xd = ds.inputs.data();
  const std::size_t pixels = static_cast<std::size_t>(count) * rows * cols;
  for (std::size_t i = 0; i < pixels; ++i) {
    xd[i] = static_cast<double>(img[16 + i]) / 255.0;
  }
  ds.labels.reserve(count);
  std::int64_t max_label = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::int64_t l = static_cast<std::int64_t>(lab[8 + i]);
    max_label = std::max(max_label, l);
    ds.labels.push_back(l);
  }
  ds.class_count = max_label + 1;
  ds.validate();
  return ds;
}

void write_idx(const Dataset& dataset, const std::string& images_path,
               const std::string& labels_path) {
  dataset.validate();
  if (dataset.inputs.rank() != 4 || dataset.inputs.extent(1) != 1) {
    throw ShapeError("write_idx expects [N x 1 x H x W] inputs, got " +
                     shape_str(dataset.inputs.shape()));
  }
  const std::int64_t n = dataset.inputs.extent(0);
  const std::int64_t h = dataset.inputs.extent(2);
  const std::int64_t w = dataset.inputs.extent(3);

  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw FormatError("cannot open for writing: " + images_path);
  write_be32(img, kIdxImagesMagic);
  write_be32(img, static_cast<std::uint32_t>(n));
  write_be32(img, static_cast<std::uint32_t>(h));
  write_be32(img, static_cast<std::uint32_t>(w));
  const double* xd = dataset.inputs.data();
  std::vector<unsigned char> bytes(static_cast<std::size_t>(n * h * w));
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const double v = std::clamp(xd[i], 0.0, 1.0);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  img.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));

  std::ofstream lab(labels_path, std::ios::binary);
  if (!lab) throw FormatError("cannot open for writing: " + labels_path);
  write_be32(lab, kIdxLabelsMagic);
  write_be32(lab, static_cast<std::uint32_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const auto b = static_cast<unsigned char>(dataset.labels[static_cast<std::size_t>(i)]);
    lab.write(reinterpret_cast<const char*>(&b), 1);
  }
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.push_back("");
  return cells;
}

double parse_cell(const std::string& cell, std::size_t line_no, const std::string& path) {
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  while (begin < end && (*begin == ' ' || *begin == '\t')) ++begin;
  while (end > begin && (end[-1] == ' ' || end[-1] == '\t' || end[-1] == '\r')) --end;
  double value = 0.0;
  const auto res = std::from_chars(begin, end, value);
  if (res.ec != std::errc() || res.ptr != end || begin == end) {
    throw FormatError(path + ": non-numeric cell '" + cell + "' at line " +
                      std::to_string(line_no));
  }
  return value;
}

}  // namespace

Dataset load_csv(const std::string& path, const std::string& label_column,
                 std::int64_t class_count) {
  std::ifstream in(path);
  if (!in) {
    throw FormatError("cannot open file: " + path);
  }
  std::string line;
  if (!std::getline(in, line)) {
    throw FormatError(path + ": empty file (missing header) at line 1");
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> header = split_csv_line(line);
  std::int64_t label_idx = -1;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == label_column) label_idx = static_cast<std::int64_t>(c);
  }
  if (label_idx < 0) {
    throw FormatError(path + ": header has no column named '" + label_column + "'");
  }
  const std::size_t width = header.size();
  if (width < 2) {
    throw FormatError(path + ": need at least one feature column besides '" + label_column + "'");
  }

  std::vector<double> features;
  std::vector<std::int64_t> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> cells = split_csv_line(line);
    if (cells.size() != width) {
      throw FormatError(path + ": ragged row with " + std::to_string(cells.size()) +
                        " cells (expected " + std::to_string(width) + ") at line " +
                        std::to_string(line_no));
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const double v = parse_cell(cells[c], line_no, path);
      if (static_cast<std::int64_t>(c) == label_idx) {
        if (v != std::floor(v) || v < 0.0) {
          throw ValueError(path + ": label '" + cells[c] + "' at line " + std::to_string(line_no) +
                           " is not a non-negative integer");
        }
        labels.push_back(static_cast<std::int64_t>(v));
      } else {
        features.push_back(v);
      }
    }
  }
  if (labels.empty()) {
    throw FormatError(path + ": no data rows");
  }

  Dataset ds;
  const std::int64_t n = static_cast<std::int64_t>(labels.size());
  const std::int64_t d = static_cast<std::int64_t>(width) - 1;
  ds.inputs = Tensor({n, d}, std::move(features));
  ds.labels = std::move(labels);
  std::int64_t max_label = 0;
  for (std::int64_t l : ds.labels) max_label = std::max(max_label, l);
  if (class_count >= 0) {
    if (max_label >= class_count) {
      throw ValueError(path + ": label " + std::to_string(max_label) +
                       " outside declared class count " + std::to_string(class_count));
    }
    ds.class_count = class_count;
  } else {
    ds.class_count = max_label + 1;
  }
  ds.validate();
  return ds;
}

Dataset make_synthetic(SyntheticKind kind, std::int64_t n_per_class, std::int64_t classes,
                       double noise, std::uint64_t seed) {
  if (n_per_class < 1 || classes < 2) {
    throw ValueError("make_synthetic needs n_per_class >= 1 and classes >= 2");
  }
  if (noise < 0.0) {
    throw ValueError("make_synthetic noise must be non-negative");
  }
  RngState rng(RngState::mix(seed, 11));
  const std::int64_t n = n_per_class * classes;
  Dataset ds;
  ds.inputs = Tensor({n, 2});
  ds.labels.reserve(static_cast<std::size_t>(n));
  ds.class_count = classes;
  double* xd = ds.inputs.data();
  std::int64_t row = 0;
  for (std::int64_t k = 0; k < classes; ++k) {
    const double angle0 = 2.0 * std::numbers::pi * static_cast<double>(k) /
                          static_cast<double>(classes);
    for (std::int64_t j = 0; j < n_per_class; ++j, ++row) {
      double x = 0.0;
      double y = 0.0;
      if (kind == SyntheticKind::kBlobs) {
        const double cx = 4.0 * std::cos(angle0);
        const double cy = 4.0 * std::sin(angle0);
        x = cx + noise * rng.normal();
        y = cy + noise * rng.normal();
      } else {
        const double t = (static_cast<double>(j) + 0.5) / static_cast<double>(n_per_class);
        const double radius = 0.25 + 1.75 * t;
        const double turns = 1.5;
        const double theta =
            2.0 * std::numbers::pi * turns * t + angle0 + noise * rng.normal();
        x = radius * std::cos(theta);
        y = radius * std::sin(theta);
      }
      xd[row * 2] = x;
      xd[row * 2 + 1] = y;
      ds.labels.push_back(k);
    }
  }
  ds.validate();
  return ds;
}

namespace {

// Smooth standardized random field: i.i.d. normals, two 3x3 box blurs, then
// shifted/scaled to mean 0 and variance 1.
std::vector<double> make_template(std::int64_t h, std::int64_t w, RngState& rng) {
  std::vector<double> field(static_cast<std::size_t>(h * w));
  for (double& v : field) v = rng.normal();
  std::vector<double> tmp(field.size());
  for (int pass = 0; pass < 2; ++pass) {
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        double acc = 0.0;
        int cnt = 0;
        for (std::int64_t dy = -1; dy <= 1; ++dy) {
          for (std::int64_t dx = -1; dx <= 1; ++dx) {
            const std::int64_t yy = y + dy;
            const std::int64_t xx = x + dx;
            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
            acc += field[static_cast<std::size_t>(yy * w + xx)];
            ++cnt;
          }
        }
        tmp[static_cast<std::size_t>(y * w + x)] = acc / static_cast<double>(cnt);
      }
    }
    field.swap(tmp);
  }
  double mean = 0.0;
  for (double v : field) mean += v;
  mean /= static_cast<double>(field.size());
  double var = 0.0;
  for (double v : field) var += (v - mean) * (v - mean);
  var /= static_cast<double>(field.size());
  const double inv = var > 0.0 ? 1.0 / std::sqrt(var) : 1.0;
  for (double& v : field) v = (v - mean) * inv;
  return field;
}

}  // namespace

Dataset make_synthetic_images(std::int64_t classes, std::int64_t n_per_class, std::int64_t height,
                              std::int64_t width, double noise, std::uint64_t seed) {
  if (classes < 2 || n_per_class < 1 || height < 1 || width < 1) {
    throw ValueError("make_synthetic_images needs classes >= 2, n_per_class >= 1 and a "
                     "positive image size");
  }
  if (noise < 0.0) {
    throw ValueError("make_synthetic_images noise must be non-negative");
  }
  std::vector<std::vector<double>> templates;
  templates.reserve(static_cast<std::size_t>(classes));
  for (std::int64_t k = 0; k < classes; ++k) {
    RngState trng(RngState::mix(seed, 1000 + static_cast<std::uint64_t>(k)));
    templates.push_back(make_template(height, width, trng));
  }
  RngState rng(RngState::mix(seed, 2000));

  const std::int64_t n = classes * n_per_class;
  Dataset ds;
  ds.inputs = Tensor({n, 1, height, width});
  ds.labels.reserve(static_cast<std::size_t>(n));
  ds.class_count = classes;
  double* xd = ds.inputs.data();
  const std::int64_t pixels = height * width;
  std::int64_t row = 0;
  for (std::int64_t k = 0; k < classes; ++k) {
    const std::vector<double>& tmpl = templates[static_cast<std::size_t>(k)];
    for (std::int64_t j = 0; j < n_per_class; ++j, ++row) {
      double* img = xd + row * pixels;
      for (std::int64_t p = 0; p < pixels; ++p) {
        const double v = 0.5 + 0.16 * tmpl[static_cast<std::size_t>(p)] + noise * rng.normal();
        img[p] = std::clamp(v, 0.0, 1.0);
      }
      ds.labels.push_back(k);
    }
  }
  ds.validate();
  return ds;
}

std::pair<Dataset, Dataset> split(const Dataset& dataset, double val_fraction,
                                  std::uint64_t seed) {
  dataset.validate();
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ValueError("split: val_fraction must lie strictly inside (0, 1)");
  }
  const std::int64_t n = dataset.size();
  const std::int64_t val_n =
      std::llround(val_fraction * static_cast<double>(n));
  if (val_n < 1 || val_n >= n) {
    throw ValueError("split: both splits must be non-empty (N=" + std::to_string(n) +
                     ", fraction=" + std::to_string(val_fraction) + ")");
  }
  RngState rng(RngState::mix(seed, 33));
  const std::vector<std::int64_t> perm = rng.permutation(n);

  auto take = [&](std::int64_t begin, std::int64_t end) {
    Dataset out;
    out.class_count = dataset.class_count;
    out.inputs = gather_inputs(dataset, perm, begin, end);
    out.labels = gather_labels(dataset, perm, begin, end);
    return out;
  };
  // Validation takes the leading slice of the permutation.
  Dataset val = take(0, val_n);
  Dataset train = take(val_n, n);
  return {std::move(train), std::move(val)};
}

NormStats compute_norm_stats(const Dataset& train) {
  train.validate();
  const std::int64_t n = train.size();
  const std::int64_t features = train.inputs.size() / n;
  NormStats stats;
  stats.mean.assign(static_cast<std::size_t>(features), 0.0);
  stats.stddev.assign(static_cast<std::size_t>(features), 0.0);
  const double* xd = train.inputs.data();
  for (std::int64_t r = 0; r < n; ++r) {
    for (std::int64_t f = 0; f < features; ++f) {
      stats.mean[static_cast<std::size_t>(f)] += xd[r * features + f];
    }
  }
  for (double& m : stats.mean) m /= static_cast<double>(n);
  for (std::int64_t r = 0; r < n; ++r) {
    for (std::int64_t f = 0; f < features; ++f) {
      const double d = xd[r * features + f] - stats.mean[static_cast<std::size_t>(f)];
      stats.stddev[static_cast<std::size_t>(f)] += d * d;
    }
  }
  for (double& s : stats.stddev) s = std::sqrt(s / static_cast<double>(n));
  return stats;
}

void apply_normalization(Dataset& dataset, const NormStats& stats) {
  const std::int64_t n = dataset.size();
  const std::int64_t features = dataset.inputs.size() / n;
  if (features != static_cast<std::int64_t>(stats.mean.size())) {
    throw ShapeError("normalization stats cover " + std::to_string(stats.mean.size()) +
                     " features, dataset has " + std::to_string(features));
  }
  double* xd = dataset.inputs.data();
  for (std::int64_t r = 0; r < n; ++r) {
    for (std::int64_t f = 0; f < features; ++f) {
      const double sd = stats.stddev[static_cast<std::size_t>(f)];
      const double inv = sd < 1e-12 ? 1.0 : 1.0 / sd;
      xd[r * features + f] = (xd[r * features + f] - stats.mean[static_cast<std::size_t>(f)]) * inv;
    }
  }
}

BatchPlan::BatchPlan(std::int64_t dataset_size, std::int64_t batch_size, bool drop_last,
                     std::uint64_t seed)
    : dataset_size_(dataset_size), batch_size_(batch_size), drop_last_(drop_last), seed_(seed) {
  if (dataset_size < 1 || batch_size < 1) {
    throw ValueError("BatchPlan needs a positive dataset size and batch size");
  }
  if (drop_last && dataset_size < batch_size) {
    throw ValueError("drop_last with batch_size " + std::to_string(batch_size) +
                     " would discard the whole dataset of " + std::to_string(dataset_size));
  }
}

std::int64_t BatchPlan::batch_count() const {
  if (drop_last_) return dataset_size_ / batch_size_;
  return (dataset_size_ + batch_size_ - 1) / batch_size_;
}

std::vector<std::int64_t> BatchPlan::epoch_permutation(std::int64_t epoch) const {
  RngState rng(RngState::mix(seed_, static_cast<std::uint64_t>(epoch)));
  return rng.permutation(dataset_size_);
}

std::vector<std::pair<std::int64_t, std::int64_t>> BatchPlan::batch_ranges() const {
  std::vector<std::pair<std::int64_t, std::int64_t>> ranges;
  const std::int64_t count = batch_count();
  for (std::int64_t b = 0; b < count; ++b) {
    const std::int64_t begin = b * batch_size_;
    const std::int64_t end = std::min(dataset_size_, begin + batch_size_);
    ranges.emplace_back(begin, end);
  }
  return ranges;
}

Tensor gather_inputs(const Dataset& dataset, const std::vector<std::int64_t>& permutation,
                     std::int64_t begin, std::int64_t end) {
  if (begin < 0 || end > static_cast<std::int64_t>(permutation.size()) || begin >= end) {
    throw ValueError("gather_inputs: invalid range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ")");
  }
  std::vector<std::int64_t> shape = dataset.inputs.shape();
  shape[0] = end - begin;
  Tensor out(shape);
  const std::int64_t stride = dataset.inputs.size() / dataset.size();
  const double* src = dataset.inputs.data();
  double* dst = out.data();
  for (std::int64_t r = begin; r < end; ++r) {
    const std::int64_t idx = permutation[static_cast<std::size_t>(r)];
    std::copy(src + idx * stride, src + (idx + 1) * stride, dst + (r - begin) * stride);
  }
  return out;
}

std::vector<std::int64_t> gather_labels(const Dataset& dataset,
                                        const std::vector<std::int64_t>& permutation,
                                        std::int64_t begin, std::int64_t end) {
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(end - begin));
  for (std::int64_t r = begin; r < end; ++r) {
    out.push_back(dataset.labels[static_cast<std::size_t>(permutation[static_cast<std::size_t>(r)])]);
  }
  return out;
}

Tensor one_hot(const std::vector<std::int64_t>& labels, std::int64_t classes) {
  if (labels.empty() || classes < 1) {
    throw ValueError("one_hot needs labels and a positive class count");
  }
  Tensor out({static_cast<std::int64_t>(labels.size()), classes});
  double* d = out.data();
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const std::int64_t l = labels[r];
    if (l < 0 || l >= classes) {
      throw ValueError("label " + std::to_string(l) + " outside [0, " + std::to_string(classes) +
                       ")");
    }
    d[static_cast<std::int64_t>(r) * classes + l] = 1.0;
  }
  return out;
}

}  // namespace flexkd
