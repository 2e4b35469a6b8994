#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "flexkd/errors.hpp"

namespace flexkd {

/// Dense n-dimensional array of 64-bit floats in row-major order.
///
/// Tensors are plain values: every operation below is a pure function that
/// never mutates its inputs. Reductions run in sequential row-major order so
/// results are bit-reproducible run to run.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> shape);  // zero-filled
  Tensor(std::vector<std::int64_t> shape, std::vector<double> values);

  static Tensor zeros(std::vector<std::int64_t> shape);
  static Tensor full(std::vector<std::int64_t> shape, double value);
  static Tensor scalar(double value);  // shape {1}

  const std::vector<std::int64_t>& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t extent(std::int64_t axis) const;
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double item() const;  // requires size() == 1
  double at(std::initializer_list<std::int64_t> index) const;
  double& at(std::initializer_list<std::int64_t> index);

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

 private:
  std::int64_t flat_index(std::initializer_list<std::int64_t> index) const;

  std::vector<std::int64_t> shape_;
  std::vector<double> data_;
};

std::string shape_str(const std::vector<std::int64_t>& shape);

/// Standard matrix product of a [m x k] and b [k x p].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Softmax along `axis` (negative counts from the back), max-shifted for
/// stability. Each slice sums to 1.
Tensor softmax(const Tensor& x, std::int64_t axis = -1);

/// Elementwise natural log; throws ValueError on non-positive entries.
Tensor log(const Tensor& x);

/// Elementwise exp; throws NumericError if any entry overflows.
Tensor exp(const Tensor& x);

/// Elementwise binary ops. Operands must have equal shapes, or one operand may
/// omit the leading batch axis of the other (it is then broadcast across it).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double c);

/// Full reductions to a shape-{1} tensor, summed in row-major order.
Tensor reduce_sum(const Tensor& x);
Tensor reduce_mean(const Tensor& x);

Tensor reshape(const Tensor& x, std::vector<std::int64_t> shape);
Tensor transpose2d(const Tensor& x);

}  // namespace flexkd
