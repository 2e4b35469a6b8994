#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "flexkd/param_store.hpp"
#include "flexkd/rng.hpp"
#include "flexkd/tensor.hpp"

namespace flexkd {

enum class Mode { kTrain, kEval };

/// Fully connected layer, weight [out x in] and bias [out], Kaiming-uniform
/// fan-in init with zero bias. Supports running on a leading slice of its
/// input/output features so width-sliced sub-models can reuse one parameter
/// set; gradients scatter back into the full slots.
class LinearLayer {
 public:
  struct Context {
    Tensor input;  // [batch x in_active]
    std::int64_t in_active = 0;
    std::int64_t out_active = 0;
    bool valid = false;
  };

  LinearLayer(ParamStore& store, const std::string& name, std::int64_t in_features,
              std::int64_t out_features, RngState& rng);

  /// y = x W_slice^T + b_slice; negative active counts mean "full".
  Tensor forward(const ParamStore& store, const Tensor& x, std::int64_t in_active = -1,
                 std::int64_t out_active = -1, Context* ctx = nullptr) const;
  /// Returns input gradient; accumulates weight/bias gradients into the store.
  Tensor backward(ParamStore& store, const Context& ctx, const Tensor& upstream) const;

  ParamRef weight() const { return weight_; }
  ParamRef bias() const { return bias_; }
  std::int64_t in_features() const { return in_features_; }
  std::int64_t out_features() const { return out_features_; }

 private:
  ParamRef weight_;
  ParamRef bias_;
  std::int64_t in_features_ = 0;
  std::int64_t out_features_ = 0;
};

/// 2-D convolution over [N x C x H x W], square odd kernel, with the same
/// leading-channel slicing contract as LinearLayer.
class Conv2dLayer {
 public:
  struct Context {
    Tensor input;  // [N x in_active x H x W]
    std::int64_t in_active = 0;
    std::int64_t out_active = 0;
    bool valid = false;
  };

  Conv2dLayer(ParamStore& store, const std::string& name, std::int64_t in_channels,
              std::int64_t out_channels, std::int64_t kernel, std::int64_t stride,
              std::int64_t padding, RngState& rng);

  Tensor forward(const ParamStore& store, const Tensor& x, std::int64_t in_active = -1,
                 std::int64_t out_active = -1, Context* ctx = nullptr) const;
  Tensor backward(ParamStore& store, const Context& ctx, const Tensor& upstream) const;

  ParamRef kernel() const { return kernel_; }
  ParamRef bias() const { return bias_; }
  std::int64_t in_channels() const { return in_channels_; }
  std::int64_t out_channels() const { return out_channels_; }
  std::int64_t kernel_size() const { return kernel_size_; }
  std::int64_t stride() const { return stride_; }
  std::int64_t padding() const { return padding_; }

  /// floor((extent + 2 padding - kernel) / stride) + 1; throws if not positive.
  std::int64_t out_extent(std::int64_t in_extent) const;

 private:
  ParamRef kernel_;
  ParamRef bias_;
  std::int64_t in_channels_ = 0;
  std::int64_t out_channels_ = 0;
  std::int64_t kernel_size_ = 0;
  std::int64_t stride_ = 1;
  std::int64_t padding_ = 0;
};

/// Batch normalization over [N x C] or [N x C x H x W] (channel axis 1).
/// Train mode normalizes with batch moments and folds them into the running
/// statistics; eval mode uses the running statistics only. The affine pair
/// may be private to this layer or a leading slice of a shared full-width
/// pair (the running moments are always private).
class BatchNormLayer {
 public:
  struct Context {
    Tensor xhat;                 // normalized input, same shape as x
    std::vector<double> invstd;  // per channel
    Mode mode = Mode::kTrain;
    std::int64_t channels = 0;
    bool valid = false;
  };

  BatchNormLayer(ParamStore& store, const std::string& name, std::int64_t channels,
                 double momentum = 0.1, double epsilon = 1e-5);
  /// Shared-affine variant: gamma/beta come from an existing full-width pair
  /// and this layer uses their leading `channels` entries.
  BatchNormLayer(ParamStore& store, const std::string& name, std::int64_t channels,
                 double momentum, double epsilon, ParamRef shared_gamma, ParamRef shared_beta);

  /// Mutates the store only in train mode (running-moment update).
  Tensor forward(ParamStore& store, const Tensor& x, Mode mode, Context* ctx = nullptr) const;
  Tensor backward(ParamStore& store, const Context& ctx, const Tensor& upstream) const;

  ParamRef gamma() const { return gamma_; }
  ParamRef beta() const { return beta_; }
  ParamRef running_mean() const { return running_mean_; }
  ParamRef running_var() const { return running_var_; }
  std::int64_t channels() const { return channels_; }

 private:
  ParamRef gamma_;
  ParamRef beta_;
  ParamRef running_mean_;
  ParamRef running_var_;
  std::int64_t channels_ = 0;
  double momentum_ = 0.1;
  double epsilon_ = 1e-5;
};

struct ReluContext {
  Tensor input;
  bool valid = false;
};

Tensor relu_forward(const Tensor& x, ReluContext* ctx = nullptr);
Tensor relu_backward(const ReluContext& ctx, const Tensor& upstream);

/// Non-padded average pooling over [N x C x H x W].
struct AvgPool2dContext {
  std::vector<std::int64_t> input_shape;
  std::int64_t kernel = 0;
  std::int64_t stride = 0;
  bool valid = false;
};

Tensor avg_pool2d_forward(const Tensor& x, std::int64_t kernel, std::int64_t stride,
                          AvgPool2dContext* ctx = nullptr);
Tensor avg_pool2d_backward(const AvgPool2dContext& ctx, const Tensor& upstream);

/// Mean over the spatial axes: [N x C x H x W] -> [N x C].
struct GlobalAvgPoolContext {
  std::vector<std::int64_t> input_shape;
  bool valid = false;
};

Tensor global_avg_pool_forward(const Tensor& x, GlobalAvgPoolContext* ctx = nullptr);
Tensor global_avg_pool_backward(const GlobalAvgPoolContext& ctx, const Tensor& upstream);

/// Central-finite-difference check of an analytic gradient.
///
/// `loss_fn` must return the scalar loss and, as a side effect, accumulate the
/// analytic gradients of all trainable parameters into the store. It must be
/// deterministic given the store values (batch-norm running-moment drift is
/// fine: it never feeds back into a train-mode loss value).
struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_param;
  std::int64_t worst_flat_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

GradCheckReport grad_check_report(const std::function<double(ParamStore&)>& loss_fn,
                                  ParamStore& store, double step = 1e-5);
double grad_check(const std::function<double(ParamStore&)>& loss_fn, ParamStore& store,
                  double step = 1e-5);

}  // namespace flexkd
