#include "flexkd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace flexkd {

namespace {

std::int64_t checked_product(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (std::int64_t e : shape) {
    if (e <= 0) {
      throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    n *= e;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::int64_t> shape)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(checked_product(shape_)), 0.0) {}

Tensor::Tensor(std::vector<std::int64_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  const std::int64_t expected = checked_product(shape_);
  if (expected != static_cast<std::int64_t>(data_.size())) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<std::int64_t> shape, double value) {
  Tensor t(std::move(shape));
  for (double& v : t.data_) v = value;
  return t;
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

std::int64_t Tensor::extent(std::int64_t axis) const {
  if (axis < 0 || axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (size() != 1) {
    throw ShapeError("item() requires a single-element tensor, got shape " + shape_str(shape_));
  }
  return data_[0];
}

std::int64_t Tensor::flat_index(std::initializer_list<std::int64_t> index) const {
  if (static_cast<std::int64_t>(index.size()) != rank()) {
    throw ShapeError("index rank " + std::to_string(index.size()) + " does not match shape " +
                     shape_str(shape_));
  }
  std::int64_t flat = 0;
  std::size_t axis = 0;
  for (std::int64_t i : index) {
    const std::int64_t e = shape_[axis];
    if (i < 0 || i >= e) {
      throw ShapeError("index " + std::to_string(i) + " out of range for axis " +
                       std::to_string(axis) + " of shape " + shape_str(shape_));
    }
    flat = flat * e + i;
    ++axis;
  }
  return flat;
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  return data_[static_cast<std::size_t>(flat_index(index))];
}

double& Tensor::at(std::initializer_list<std::int64_t> index) {
  return data_[static_cast<std::size_t>(flat_index(index))];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string shape_str(const std::vector<std::int64_t>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) s += ",";
    s += std::to_string(shape[i]);
  }
  s += ")";
  return s;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul expects 2-d operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::int64_t m = a.extent(0);
  const std::int64_t k = a.extent(1);
  const std::int64_t p = b.extent(1);
  if (k != b.extent(0)) {
    throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor out({m, p});
  const double* ad = a.data();
  const double* bd = b.data();
  double* od = out.data();
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = ad + i * k;
    double* orow = od + i * p;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = bd + kk * p;
      for (std::int64_t j = 0; j < p; ++j) {
        orow[j] += av * brow[j];
      }
    }
  }
  return out;
}

Tensor softmax(const Tensor& x, std::int64_t axis) {
  std::int64_t ax = axis;
  if (ax < 0) ax += x.rank();
  if (ax < 0 || ax >= x.rank()) {
    throw ShapeError("softmax axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(x.shape()));
  }
  std::int64_t outer = 1;
  std::int64_t inner = 1;
  for (std::int64_t d = 0; d < ax; ++d) outer *= x.extent(d);
  for (std::int64_t d = ax + 1; d < x.rank(); ++d) inner *= x.extent(d);
  const std::int64_t n = x.extent(ax);

  Tensor out(x.shape());
  const double* xd = x.data();
  double* od = out.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * n * inner + in;
      double mx = xd[base];
      for (std::int64_t c = 1; c < n; ++c) {
        mx = std::max(mx, xd[base + c * inner]);
      }
      double sum = 0.0;
      for (std::int64_t c = 0; c < n; ++c) {
        const double e = std::exp(xd[base + c * inner] - mx);
        od[base + c * inner] = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (std::int64_t c = 0; c < n; ++c) {
        od[base + c * inner] *= inv;
      }
    }
  }
  return out;
}

Tensor log(const Tensor& x) {
  Tensor out(x.shape());
  const double* xd = x.data();
  double* od = out.data();
  for (std::int64_t i = 0; i < x.size(); ++i) {
    if (!(xd[i] > 0.0)) {
      throw ValueError("log: non-positive entry " + std::to_string(xd[i]) + " at flat index " +
                       std::to_string(i));
    }
    od[i] = std::log(xd[i]);
  }
  return out;
}

Tensor exp(const Tensor& x) {
  Tensor out(x.shape());
  const double* xd = x.data();
  double* od = out.data();
  for (std::int64_t i = 0; i < x.size(); ++i) {
    od[i] = std::exp(xd[i]);
    if (!std::isfinite(od[i])) {
      throw NumericError("exp: overflow at flat index " + std::to_string(i) + " (input " +
                         std::to_string(xd[i]) + ")");
    }
  }
  return out;
}

namespace {

// Binary elementwise op with the leading-batch broadcast rule: shapes equal,
// or the smaller operand's shape equals the larger one's shape minus its
// leading axis.
template <typename F>
Tensor binary_op(const Tensor& a, const Tensor& b, F f, const char* name) {
  if (a.same_shape(b)) {
    Tensor out(a.shape());
    const double* ad = a.data();
    const double* bd = b.data();
    double* od = out.data();
    for (std::int64_t i = 0; i < a.size(); ++i) od[i] = f(ad[i], bd[i]);
    return out;
  }
  const Tensor* big = &a;
  const Tensor* small = &b;
  bool small_is_b = true;
  if (b.rank() == a.rank() + 1) {
    big = &b;
    small = &a;
    small_is_b = false;
  }
  const bool tail_matches =
      big->rank() == small->rank() + 1 &&
      std::equal(big->shape().begin() + 1, big->shape().end(), small->shape().begin(),
                 small->shape().end());
  if (!tail_matches) {
    throw ShapeError(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const std::int64_t batch = big->extent(0);
  const std::int64_t stride = small->size();
  Tensor out(big->shape());
  const double* bigd = big->data();
  const double* smalld = small->data();
  double* od = out.data();
  for (std::int64_t n = 0; n < batch; ++n) {
    const double* row = bigd + n * stride;
    double* orow = od + n * stride;
    for (std::int64_t i = 0; i < stride; ++i) {
      orow[i] = small_is_b ? f(row[i], smalld[i]) : f(smalld[i], row[i]);
    }
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, [](double x, double y) { return x + y; }, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, [](double x, double y) { return x - y; }, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, [](double x, double y) { return x * y; }, "mul");
}

Tensor scale(const Tensor& a, double c) {
  Tensor out(a.shape());
  const double* ad = a.data();
  double* od = out.data();
  for (std::int64_t i = 0; i < a.size(); ++i) od[i] = ad[i] * c;
  return out;
}

Tensor reduce_sum(const Tensor& x) {
  double s = 0.0;
  const double* xd = x.data();
  for (std::int64_t i = 0; i < x.size(); ++i) s += xd[i];
  return Tensor::scalar(s);
}

Tensor reduce_mean(const Tensor& x) {
  return Tensor::scalar(reduce_sum(x).item() / static_cast<double>(x.size()));
}

Tensor reshape(const Tensor& x, std::vector<std::int64_t> shape) {
  // The constructor rejects a shape whose product differs from the data size.
  return Tensor(std::move(shape), x.values());
}

Tensor transpose2d(const Tensor& x) {
  if (x.rank() != 2) {
    throw ShapeError("transpose2d expects a 2-d tensor, got " + shape_str(x.shape()));
  }
  const std::int64_t m = x.extent(0);
  const std::int64_t n = x.extent(1);
  Tensor out({n, m});
  const double* xd = x.data();
  double* od = out.data();
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      od[j * m + i] = xd[i * n + j];
    }
  }
  return out;
}

}  // namespace flexkd
