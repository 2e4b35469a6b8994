#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "flexkd/rng.hpp"
#include "flexkd/tensor.hpp"

namespace flexkd {

/// Labeled inputs: [N x features] for point data, [N x C x H x W] for images.
struct Dataset {
  Tensor inputs;
  std::vector<std::int64_t> labels;  // in [0, class_count)
  std::int64_t class_count = 0;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  void validate() const;
};

/// IDX (big-endian) loader. Images are scaled to [0, 1] doubles with shape
/// [N x 1 x H x W]; labels are bytes. Malformed files raise FormatError with
/// the offending byte offset.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// Writes a [N x 1 x H x W] dataset as an IDX pair, quantizing pixels to u8.
void write_idx(const Dataset& dataset, const std::string& images_path,
               const std::string& labels_path);

/// Numeric CSV with a header row; the named column carries integer labels.
/// class_count < 0 infers max(label) + 1.
Dataset load_csv(const std::string& path, const std::string& label_column,
                 std::int64_t class_count = -1);

enum class SyntheticKind { kBlobs, kSpirals };

/// Seeded 2-D point clouds: Gaussian blobs at fixed per-class centers, or
/// interleaved Archimedean spiral arms with angular noise.
Dataset make_synthetic(SyntheticKind kind, std::int64_t n_per_class, std::int64_t classes,
                       double noise, std::uint64_t seed);

/// Seeded single-channel images: one smooth random template per class plus
/// i.i.d. pixel noise, values in [0, 1]. A desk-scale stand-in for a real
/// image benchmark that still exercises the conv stack.
Dataset make_synthetic_images(std::int64_t classes, std::int64_t n_per_class, std::int64_t height,
                              std::int64_t width, double noise, std::uint64_t seed);

/// Seeded permutation split into (train, val); both parts non-empty.
std::pair<Dataset, Dataset> split(const Dataset& dataset, double val_fraction,
                                  std::uint64_t seed);

/// Per-feature affine normalization fitted on the training split only.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;  // entries < 1e-12 are treated as 1
};

NormStats compute_norm_stats(const Dataset& train);
void apply_normalization(Dataset& dataset, const NormStats& stats);

/// Deterministic epoch batching: a seeded permutation per (seed, epoch) cut
/// into consecutive ranges.
class BatchPlan {
 public:
  BatchPlan(std::int64_t dataset_size, std::int64_t batch_size, bool drop_last,
            std::uint64_t seed);

  std::int64_t batch_count() const;
  /// Pure function of (seed, epoch): the same arguments always return the
  /// same permutation of [0, dataset_size).
  std::vector<std::int64_t> epoch_permutation(std::int64_t epoch) const;
  /// Half-open index ranges into the permutation, one per batch.
  std::vector<std::pair<std::int64_t, std::int64_t>> batch_ranges() const;

  std::int64_t dataset_size() const { return dataset_size_; }
  std::int64_t batch_size() const { return batch_size_; }
  bool drop_last() const { return drop_last_; }

 private:
  std::int64_t dataset_size_ = 0;
  std::int64_t batch_size_ = 0;
  bool drop_last_ = false;
  std::uint64_t seed_ = 0;
};

/// Copies the selected rows into a fresh batch tensor / label vector.
Tensor gather_inputs(const Dataset& dataset, const std::vector<std::int64_t>& permutation,
                     std::int64_t begin, std::int64_t end);
std::vector<std::int64_t> gather_labels(const Dataset& dataset,
                                        const std::vector<std::int64_t>& permutation,
                                        std::int64_t begin, std::int64_t end);

Tensor one_hot(const std::vector<std::int64_t>& labels, std::int64_t classes);

}  // namespace flexkd
