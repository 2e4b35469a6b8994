#include "flexkd/layers.hpp"

#include <cmath>

namespace flexkd {

namespace {

Tensor kaiming_uniform(RngState& rng, std::vector<std::int64_t> shape, std::int64_t fan_in) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  return rand_uniform(rng, std::move(shape), -bound, bound);
}

void require_valid(bool valid, const char* layer) {
  if (!valid) {
    throw ValueError(std::string(layer) + ": backward called without a matching forward context");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// LinearLayer

LinearLayer::LinearLayer(ParamStore& store, const std::string& name, std::int64_t in_features,
                         std::int64_t out_features, RngState& rng)
    : in_features_(in_features), out_features_(out_features) {
  if (in_features <= 0 || out_features <= 0) {
    throw ShapeError("linear layer " + name + ": feature counts must be positive");
  }
  weight_ = store.add(name + ".weight", kaiming_uniform(rng, {out_features, in_features}, in_features));
  bias_ = store.add(name + ".bias", Tensor::zeros({out_features}));
}

Tensor LinearLayer::forward(const ParamStore& store, const Tensor& x, std::int64_t in_active,
                            std::int64_t out_active, Context* ctx) const {
  if (in_active < 0) in_active = in_features_;
  if (out_active < 0) out_active = out_features_;
  if (in_active > in_features_ || out_active > out_features_ || in_active < 1 || out_active < 1) {
    throw ShapeError("linear: active slice (" + std::to_string(in_active) + "," +
                     std::to_string(out_active) + ") out of range for weight " +
                     shape_str(store.value(weight_).shape()));
  }
  if (x.rank() != 2 || x.extent(1) != in_active) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match active features " +
                     std::to_string(in_active));
  }
  const std::int64_t batch = x.extent(0);
  const Tensor& w = store.value(weight_);
  const Tensor& b = store.value(bias_);
  Tensor y({batch, out_active});
  const double* xd = x.data();
  const double* wd = w.data();
  const double* bd = b.data();
  double* yd = y.data();
  for (std::int64_t n = 0; n < batch; ++n) {
    const double* xrow = xd + n * in_active;
    double* yrow = yd + n * out_active;
    for (std::int64_t o = 0; o < out_active; ++o) {
      const double* wrow = wd + o * in_features_;
      double acc = bd[o];
      for (std::int64_t k = 0; k < in_active; ++k) acc += xrow[k] * wrow[k];
      yrow[o] = acc;
    }
  }
  if (ctx != nullptr) {
    ctx->input = x;
    ctx->in_active = in_active;
    ctx->out_active = out_active;
    ctx->valid = true;
  }
  return y;
}

Tensor LinearLayer::backward(ParamStore& store, const Context& ctx, const Tensor& upstream) const {
  require_valid(ctx.valid, "linear");
  const std::int64_t batch = ctx.input.extent(0);
  if (upstream.rank() != 2 || upstream.extent(0) != batch || upstream.extent(1) != ctx.out_active) {
    throw ShapeError("linear: upstream gradient " + shape_str(upstream.shape()) +
                     " does not match context output (" + std::to_string(batch) + "," +
                     std::to_string(ctx.out_active) + ")");
  }
  const Tensor& w = store.value(weight_);
  const double* xd = ctx.input.data();
  const double* ud = upstream.data();
  const double* wd = w.data();

  Tensor dw = Tensor::zeros(w.shape());
  Tensor db = Tensor::zeros({out_features_});
  Tensor dx({batch, ctx.in_active});
  double* dwd = dw.data();
  double* dbd = db.data();
  double* dxd = dx.data();
  for (std::int64_t n = 0; n < batch; ++n) {
    const double* xrow = xd + n * ctx.in_active;
    const double* urow = ud + n * ctx.out_active;
    double* dxrow = dxd + n * ctx.in_active;
    for (std::int64_t o = 0; o < ctx.out_active; ++o) {
      const double g = urow[o];
      dbd[o] += g;
      double* dwrow = dwd + o * in_features_;
      const double* wrow = wd + o * in_features_;
      for (std::int64_t k = 0; k < ctx.in_active; ++k) {
        dwrow[k] += g * xrow[k];
        dxrow[k] += g * wrow[k];
      }
    }
  }
  store.accumulate_grad(weight_, dw);
  store.accumulate_grad(bias_, db);
  return dx;
}

// ---------------------------------------------------------------------------
// Conv2dLayer

Conv2dLayer::Conv2dLayer(ParamStore& store, const std::string& name, std::int64_t in_channels,
                         std::int64_t out_channels, std::int64_t kernel, std::int64_t stride,
                         std::int64_t padding, RngState& rng)
    : in_channels_(in_channels),
      out_channels_(out_channels),
      kernel_size_(kernel),
      stride_(stride),
      padding_(padding) {
  if (in_channels <= 0 || out_channels <= 0) {
    throw ShapeError("conv layer " + name + ": channel counts must be positive");
  }
  if (kernel <= 0 || kernel % 2 == 0) {
    throw ValueError("conv layer " + name + ": kernel size must be odd and positive, got " +
                     std::to_string(kernel));
  }
  if (stride <= 0 || padding < 0) {
    throw ValueError("conv layer " + name + ": stride must be positive and padding non-negative");
  }
  kernel_ = store.add(name + ".weight",
                      kaiming_uniform(rng, {out_channels, in_channels, kernel, kernel},
                                      in_channels * kernel * kernel));
  bias_ = store.add(name + ".bias", Tensor::zeros({out_channels}));
}

std::int64_t Conv2dLayer::out_extent(std::int64_t in_extent) const {
  const std::int64_t out = (in_extent + 2 * padding_ - kernel_size_) / stride_ + 1;
  if (in_extent + 2 * padding_ < kernel_size_ || out <= 0) {
    throw ShapeError("conv: spatial extent " + std::to_string(in_extent) +
                     " too small for kernel " + std::to_string(kernel_size_) + " stride " +
                     std::to_string(stride_) + " padding " + std::to_string(padding_));
  }
  return out;
}

Tensor Conv2dLayer::forward(const ParamStore& store, const Tensor& x, std::int64_t in_active,
                            std::int64_t out_active, Context* ctx) const {
  if (in_active < 0) in_active = in_channels_;
  if (out_active < 0) out_active = out_channels_;
  if (in_active > in_channels_ || out_active > out_channels_ || in_active < 1 || out_active < 1) {
    throw ShapeError("conv: active slice (" + std::to_string(in_active) + "," +
                     std::to_string(out_active) + ") out of range for kernel " +
                     shape_str(store.value(kernel_).shape()));
  }
  if (x.rank() != 4 || x.extent(1) != in_active) {
    throw ShapeError("conv: input " + shape_str(x.shape()) + " does not match active channels " +
                     std::to_string(in_active));
  }
  const std::int64_t batch = x.extent(0);
  const std::int64_t h = x.extent(2);
  const std::int64_t w = x.extent(3);
  const std::int64_t ho = out_extent(h);
  const std::int64_t wo = out_extent(w);
  const std::int64_t k = kernel_size_;

  const Tensor& kern = store.value(kernel_);
  const Tensor& b = store.value(bias_);
  Tensor y({batch, out_active, ho, wo});
  const double* xd = x.data();
  const double* kd = kern.data();
  const double* bd = b.data();
  double* yd = y.data();

  for (std::int64_t n = 0; n < batch; ++n) {
    const double* xn = xd + n * in_active * h * w;
    for (std::int64_t co = 0; co < out_active; ++co) {
      const double bias_val = bd[co];
      double* yplane = yd + (n * out_active + co) * ho * wo;
      for (std::int64_t oy = 0; oy < ho; ++oy) {
        const std::int64_t iy0 = oy * stride_ - padding_;
        const std::int64_t ky_lo = std::max<std::int64_t>(0, -iy0);
        const std::int64_t ky_hi = std::min<std::int64_t>(k, h - iy0);
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          const std::int64_t ix0 = ox * stride_ - padding_;
          const std::int64_t kx_lo = std::max<std::int64_t>(0, -ix0);
          const std::int64_t kx_hi = std::min<std::int64_t>(k, w - ix0);
          double acc = bias_val;
          for (std::int64_t ci = 0; ci < in_active; ++ci) {
            const double* xplane = xn + ci * h * w;
            const double* kplane = kd + (co * in_channels_ + ci) * k * k;
            for (std::int64_t ky = ky_lo; ky < ky_hi; ++ky) {
              const double* xrow = xplane + (iy0 + ky) * w + ix0;
              const double* krow = kplane + ky * k;
              for (std::int64_t kx = kx_lo; kx < kx_hi; ++kx) {
                acc += xrow[kx] * krow[kx];
              }
            }
          }
          yplane[oy * wo + ox] = acc;
        }
      }
    }
  }
  if (ctx != nullptr) {
    ctx->input = x;
    ctx->in_active = in_active;
    ctx->out_active = out_active;
    ctx->valid = true;
  }
  return y;
}

Tensor Conv2dLayer::backward(ParamStore& store, const Context& ctx, const Tensor& upstream) const {
  require_valid(ctx.valid, "conv");
  const Tensor& x = ctx.input;
  const std::int64_t batch = x.extent(0);
  const std::int64_t h = x.extent(2);
  const std::int64_t w = x.extent(3);
  const std::int64_t ho = out_extent(h);
  const std::int64_t wo = out_extent(w);
  const std::int64_t k = kernel_size_;
  if (upstream.rank() != 4 || upstream.extent(0) != batch || upstream.extent(1) != ctx.out_active ||
      upstream.extent(2) != ho || upstream.extent(3) != wo) {
    throw ShapeError("conv: upstream gradient " + shape_str(upstream.shape()) +
                     " does not match context output");
  }
  const Tensor& kern = store.value(kernel_);
  const double* xd = x.data();
  const double* ud = upstream.data();
  const double* kd = kern.data();

  Tensor dk = Tensor::zeros(kern.shape());
  Tensor db = Tensor::zeros({out_channels_});
  Tensor dx(x.shape());
  double* dkd = dk.data();
  double* dbd = db.data();
  double* dxd = dx.data();

  for (std::int64_t n = 0; n < batch; ++n) {
    const double* xn = xd + n * ctx.in_active * h * w;
    double* dxn = dxd + n * ctx.in_active * h * w;
    for (std::int64_t co = 0; co < ctx.out_active; ++co) {
      const double* uplane = ud + (n * ctx.out_active + co) * ho * wo;
      for (std::int64_t oy = 0; oy < ho; ++oy) {
        const std::int64_t iy0 = oy * stride_ - padding_;
        const std::int64_t ky_lo = std::max<std::int64_t>(0, -iy0);
        const std::int64_t ky_hi = std::min<std::int64_t>(k, h - iy0);
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          const double g = uplane[oy * wo + ox];
          if (g == 0.0) continue;
          const std::int64_t ix0 = ox * stride_ - padding_;
          const std::int64_t kx_lo = std::max<std::int64_t>(0, -ix0);
          const std::int64_t kx_hi = std::min<std::int64_t>(k, w - ix0);
          dbd[co] += g;
          for (std::int64_t ci = 0; ci < ctx.in_active; ++ci) {
            const double* xplane = xn + ci * h * w;
            double* dxplane = dxn + ci * h * w;
            const double* kplane = kd + (co * in_channels_ + ci) * k * k;
            double* dkplane = dkd + (co * in_channels_ + ci) * k * k;
            for (std::int64_t ky = ky_lo; ky < ky_hi; ++ky) {
              const double* xrow = xplane + (iy0 + ky) * w + ix0;
              double* dxrow = dxplane + (iy0 + ky) * w + ix0;
              const double* krow = kplane + ky * k;
              double* dkrow = dkplane + ky * k;
              for (std::int64_t kx = kx_lo; kx < kx_hi; ++kx) {
                dkrow[kx] += g * xrow[kx];
                dxrow[kx] += g * krow[kx];
              }
            }
          }
        }
      }
    }
  }
  store.accumulate_grad(kernel_, dk);
  store.accumulate_grad(bias_, db);
  return dx;
}

// ---------------------------------------------------------------------------
// BatchNormLayer

BatchNormLayer::BatchNormLayer(ParamStore& store, const std::string& name, std::int64_t channels,
                               double momentum, double epsilon)
    : channels_(channels), momentum_(momentum), epsilon_(epsilon) {
  if (channels <= 0) {
    throw ShapeError("batchnorm layer " + name + ": channel count must be positive");
  }
  gamma_ = store.add(name + ".gamma", Tensor::full({channels}, 1.0));
  beta_ = store.add(name + ".beta", Tensor::zeros({channels}));
  running_mean_ = store.add(name + ".running_mean", Tensor::zeros({channels}), /*trainable=*/false);
  running_var_ = store.add(name + ".running_var", Tensor::full({channels}, 1.0), /*trainable=*/false);
}

BatchNormLayer::BatchNormLayer(ParamStore& store, const std::string& name, std::int64_t channels,
                               double momentum, double epsilon, ParamRef shared_gamma,
                               ParamRef shared_beta)
    : gamma_(shared_gamma),
      beta_(shared_beta),
      channels_(channels),
      momentum_(momentum),
      epsilon_(epsilon) {
  if (channels <= 0 || store.value(shared_gamma).size() < channels ||
      store.value(shared_beta).size() < channels) {
    throw ShapeError("batchnorm layer " + name + ": shared affine smaller than channel count");
  }
  running_mean_ = store.add(name + ".running_mean", Tensor::zeros({channels}), /*trainable=*/false);
  running_var_ = store.add(name + ".running_var", Tensor::full({channels}, 1.0), /*trainable=*/false);
}

namespace {

struct BnDims {
  std::int64_t batch = 0;
  std::int64_t channels = 0;
  std::int64_t spatial = 1;  // H*W for rank-4 input, 1 for rank-2
};

BnDims bn_dims(const Tensor& x, std::int64_t expected_channels) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw ShapeError("batchnorm: input must be [N x C] or [N x C x H x W], got " +
                     shape_str(x.shape()));
  }
  BnDims d;
  d.batch = x.extent(0);
  d.channels = x.extent(1);
  if (x.rank() == 4) d.spatial = x.extent(2) * x.extent(3);
  if (d.channels != expected_channels) {
    throw ShapeError("batchnorm: input channels " + std::to_string(d.channels) +
                     " do not match layer channels " + std::to_string(expected_channels));
  }
  return d;
}

}  // namespace

Tensor BatchNormLayer::forward(ParamStore& store, const Tensor& x, Mode mode, Context* ctx) const {
  const BnDims d = bn_dims(x, channels_);
  const std::int64_t m = d.batch * d.spatial;

  std::vector<double> mean(static_cast<std::size_t>(channels_), 0.0);
  std::vector<double> var(static_cast<std::size_t>(channels_), 0.0);
  const double* xd = x.data();

  if (mode == Mode::kTrain) {
    if (m < 2) {
      throw ValueError("batchnorm: train mode needs at least 2 values per channel, got " +
                       std::to_string(m));
    }
    for (std::int64_t n = 0; n < d.batch; ++n) {
      for (std::int64_t c = 0; c < channels_; ++c) {
        const double* row = xd + (n * channels_ + c) * d.spatial;
        double acc = 0.0;
        for (std::int64_t s = 0; s < d.spatial; ++s) acc += row[s];
        mean[static_cast<std::size_t>(c)] += acc;
      }
    }
    for (std::int64_t c = 0; c < channels_; ++c) mean[static_cast<std::size_t>(c)] /= static_cast<double>(m);
    for (std::int64_t n = 0; n < d.batch; ++n) {
      for (std::int64_t c = 0; c < channels_; ++c) {
        const double* row = xd + (n * channels_ + c) * d.spatial;
        const double mu = mean[static_cast<std::size_t>(c)];
        double acc = 0.0;
        for (std::int64_t s = 0; s < d.spatial; ++s) {
          const double t = row[s] - mu;
          acc += t * t;
        }
        var[static_cast<std::size_t>(c)] += acc;
      }
    }
    for (std::int64_t c = 0; c < channels_; ++c) var[static_cast<std::size_t>(c)] /= static_cast<double>(m);

    double* rm = store.value(running_mean_).data();
    double* rv = store.value(running_var_).data();
    for (std::int64_t c = 0; c < channels_; ++c) {
      rm[c] = (1.0 - momentum_) * rm[c] + momentum_ * mean[static_cast<std::size_t>(c)];
      rv[c] = (1.0 - momentum_) * rv[c] + momentum_ * var[static_cast<std::size_t>(c)];
    }
  } else {
    const double* rm = store.value(running_mean_).data();
    const double* rv = store.value(running_var_).data();
    for (std::int64_t c = 0; c < channels_; ++c) {
      mean[static_cast<std::size_t>(c)] = rm[c];
      var[static_cast<std::size_t>(c)] = rv[c];
    }
  }

  std::vector<double> invstd(static_cast<std::size_t>(channels_));
  for (std::int64_t c = 0; c < channels_; ++c) {
    invstd[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + epsilon_);
  }

  const double* gd = store.value(gamma_).data();
  const double* bd = store.value(beta_).data();
  Tensor y(x.shape());
  Tensor xhat(x.shape());
  double* yd = y.data();
  double* xh = xhat.data();
  for (std::int64_t n = 0; n < d.batch; ++n) {
    for (std::int64_t c = 0; c < channels_; ++c) {
      const double mu = mean[static_cast<std::size_t>(c)];
      const double is = invstd[static_cast<std::size_t>(c)];
      const double g = gd[c];
      const double be = bd[c];
      const std::int64_t base = (n * channels_ + c) * d.spatial;
      for (std::int64_t s = 0; s < d.spatial; ++s) {
        const double v = (xd[base + s] - mu) * is;
        xh[base + s] = v;
        yd[base + s] = v * g + be;
      }
    }
  }
  if (ctx != nullptr) {
    ctx->xhat = std::move(xhat);
    ctx->invstd = std::move(invstd);
    ctx->mode = mode;
    ctx->channels = channels_;
    ctx->valid = true;
  }
  return y;
}

Tensor BatchNormLayer::backward(ParamStore& store, const Context& ctx, const Tensor& upstream) const {
  require_valid(ctx.valid, "batchnorm");
  const BnDims d = bn_dims(upstream, channels_);
  if (!upstream.same_shape(ctx.xhat)) {
    throw ShapeError("batchnorm: upstream gradient " + shape_str(upstream.shape()) +
                     " does not match context " + shape_str(ctx.xhat.shape()));
  }
  const double m = static_cast<double>(d.batch * d.spatial);
  const double* ud = upstream.data();
  const double* xh = ctx.xhat.data();

  std::vector<double> sum_dy(static_cast<std::size_t>(channels_), 0.0);
  std::vector<double> sum_dy_xhat(static_cast<std::size_t>(channels_), 0.0);
  for (std::int64_t n = 0; n < d.batch; ++n) {
    for (std::int64_t c = 0; c < channels_; ++c) {
      const std::int64_t base = (n * channels_ + c) * d.spatial;
      double s1 = 0.0;
      double s2 = 0.0;
      for (std::int64_t s = 0; s < d.spatial; ++s) {
        const double g = ud[base + s];
        s1 += g;
        s2 += g * xh[base + s];
      }
      sum_dy[static_cast<std::size_t>(c)] += s1;
      sum_dy_xhat[static_cast<std::size_t>(c)] += s2;
    }
  }

  // Affine gradients scatter into the leading slice when gamma/beta are shared
  // full-width parameters.
  Tensor dgamma = Tensor::zeros(store.value(gamma_).shape());
  Tensor dbeta = Tensor::zeros(store.value(beta_).shape());
  for (std::int64_t c = 0; c < channels_; ++c) {
    dgamma.data()[c] = sum_dy_xhat[static_cast<std::size_t>(c)];
    dbeta.data()[c] = sum_dy[static_cast<std::size_t>(c)];
  }
  store.accumulate_grad(gamma_, dgamma);
  store.accumulate_grad(beta_, dbeta);

  const double* gd = store.value(gamma_).data();
  Tensor dx(upstream.shape());
  double* dxd = dx.data();
  if (ctx.mode == Mode::kTrain) {
    for (std::int64_t n = 0; n < d.batch; ++n) {
      for (std::int64_t c = 0; c < channels_; ++c) {
        const double g = gd[c];
        const double is = ctx.invstd[static_cast<std::size_t>(c)];
        const double sdy = sum_dy[static_cast<std::size_t>(c)];
        const double sdyx = sum_dy_xhat[static_cast<std::size_t>(c)];
        const std::int64_t base = (n * channels_ + c) * d.spatial;
        for (std::int64_t s = 0; s < d.spatial; ++s) {
          dxd[base + s] =
              (g * is / m) * (m * ud[base + s] - sdy - xh[base + s] * sdyx);
        }
      }
    }
  } else {
    for (std::int64_t n = 0; n < d.batch; ++n) {
      for (std::int64_t c = 0; c < channels_; ++c) {
        const double scale = gd[c] * ctx.invstd[static_cast<std::size_t>(c)];
        const std::int64_t base = (n * channels_ + c) * d.spatial;
        for (std::int64_t s = 0; s < d.spatial; ++s) {
          dxd[base + s] = scale * ud[base + s];
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// ReLU

Tensor relu_forward(const Tensor& x, ReluContext* ctx) {
  Tensor y(x.shape());
  const double* xd = x.data();
  double* yd = y.data();
  for (std::int64_t i = 0; i < x.size(); ++i) yd[i] = xd[i] > 0.0 ? xd[i] : 0.0;
  if (ctx != nullptr) {
    ctx->input = x;
    ctx->valid = true;
  }
  return y;
}

Tensor relu_backward(const ReluContext& ctx, const Tensor& upstream) {
  require_valid(ctx.valid, "relu");
  if (!upstream.same_shape(ctx.input)) {
    throw ShapeError("relu: upstream gradient " + shape_str(upstream.shape()) +
                     " does not match context " + shape_str(ctx.input.shape()));
  }
  Tensor dx(upstream.shape());
  const double* xd = ctx.input.data();
  const double* ud = upstream.data();
  double* dxd = dx.data();
  for (std::int64_t i = 0; i < upstream.size(); ++i) dxd[i] = xd[i] > 0.0 ? ud[i] : 0.0;
  return dx;
}

// ---------------------------------------------------------------------------
// Pooling

Tensor avg_pool2d_forward(const Tensor& x, std::int64_t kernel, std::int64_t stride,
                          AvgPool2dContext* ctx) {
  if (x.rank() != 4) {
    throw ShapeError("avg_pool2d: input must be [N x C x H x W], got " + shape_str(x.shape()));
  }
  if (kernel <= 0 || stride <= 0) {
    throw ValueError("avg_pool2d: kernel and stride must be positive");
  }
  const std::int64_t n = x.extent(0);
  const std::int64_t c = x.extent(1);
  const std::int64_t h = x.extent(2);
  const std::int64_t w = x.extent(3);
  if (h < kernel || w < kernel) {
    throw ShapeError("avg_pool2d: kernel " + std::to_string(kernel) + " larger than input " +
                     shape_str(x.shape()));
  }
  const std::int64_t ho = (h - kernel) / stride + 1;
  const std::int64_t wo = (w - kernel) / stride + 1;
  Tensor y({n, c, ho, wo});
  const double inv = 1.0 / static_cast<double>(kernel * kernel);
  const double* xd = x.data();
  double* yd = y.data();
  for (std::int64_t nc = 0; nc < n * c; ++nc) {
    const double* plane = xd + nc * h * w;
    double* yplane = yd + nc * ho * wo;
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        double acc = 0.0;
        for (std::int64_t ky = 0; ky < kernel; ++ky) {
          const double* row = plane + (oy * stride + ky) * w + ox * stride;
          for (std::int64_t kx = 0; kx < kernel; ++kx) acc += row[kx];
        }
        yplane[oy * wo + ox] = acc * inv;
      }
    }
  }
  if (ctx != nullptr) {
    ctx->input_shape = x.shape();
    ctx->kernel = kernel;
    ctx->stride = stride;
    ctx->valid = true;
  }
  return y;
}

Tensor avg_pool2d_backward(const AvgPool2dContext& ctx, const Tensor& upstream) {
  require_valid(ctx.valid, "avg_pool2d");
  const std::int64_t n = ctx.input_shape[0];
  const std::int64_t c = ctx.input_shape[1];
  const std::int64_t h = ctx.input_shape[2];
  const std::int64_t w = ctx.input_shape[3];
  const std::int64_t ho = (h - ctx.kernel) / ctx.stride + 1;
  const std::int64_t wo = (w - ctx.kernel) / ctx.stride + 1;
  if (upstream.rank() != 4 || upstream.extent(0) != n || upstream.extent(1) != c ||
      upstream.extent(2) != ho || upstream.extent(3) != wo) {
    throw ShapeError("avg_pool2d: upstream gradient " + shape_str(upstream.shape()) +
                     " does not match context output");
  }
  Tensor dx(ctx.input_shape);
  const double inv = 1.0 / static_cast<double>(ctx.kernel * ctx.kernel);
  const double* ud = upstream.data();
  double* dxd = dx.data();
  for (std::int64_t nc = 0; nc < n * c; ++nc) {
    double* plane = dxd + nc * h * w;
    const double* uplane = ud + nc * ho * wo;
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        const double g = uplane[oy * wo + ox] * inv;
        for (std::int64_t ky = 0; ky < ctx.kernel; ++ky) {
          double* row = plane + (oy * ctx.stride + ky) * w + ox * ctx.stride;
          for (std::int64_t kx = 0; kx < ctx.kernel; ++kx) row[kx] += g;
        }
      }
    }
  }
  return dx;
}

Tensor global_avg_pool_forward(const Tensor& x, GlobalAvgPoolContext* ctx) {
  if (x.rank() != 4) {
    throw ShapeError("global_avg_pool: input must be [N x C x H x W], got " + shape_str(x.shape()));
  }
  const std::int64_t n = x.extent(0);
  const std::int64_t c = x.extent(1);
  const std::int64_t spatial = x.extent(2) * x.extent(3);
  Tensor y({n, c});
  const double inv = 1.0 / static_cast<double>(spatial);
  const double* xd = x.data();
  double* yd = y.data();
  for (std::int64_t nc = 0; nc < n * c; ++nc) {
    const double* plane = xd + nc * spatial;
    double acc = 0.0;
    for (std::int64_t s = 0; s < spatial; ++s) acc += plane[s];
    yd[nc] = acc * inv;
  }
  if (ctx != nullptr) {
    ctx->input_shape = x.shape();
    ctx->valid = true;
  }
  return y;
}

Tensor global_avg_pool_backward(const GlobalAvgPoolContext& ctx, const Tensor& upstream) {
  require_valid(ctx.valid, "global_avg_pool");
  const std::int64_t n = ctx.input_shape[0];
  const std::int64_t c = ctx.input_shape[1];
  const std::int64_t spatial = ctx.input_shape[2] * ctx.input_shape[3];
  if (upstream.rank() != 2 || upstream.extent(0) != n || upstream.extent(1) != c) {
    throw ShapeError("global_avg_pool: upstream gradient " + shape_str(upstream.shape()) +
                     " does not match context");
  }
  Tensor dx(ctx.input_shape);
  const double inv = 1.0 / static_cast<double>(spatial);
  const double* ud = upstream.data();
  double* dxd = dx.data();
  for (std::int64_t nc = 0; nc < n * c; ++nc) {
    const double g = ud[nc] * inv;
    double* plane = dxd + nc * spatial;
    for (std::int64_t s = 0; s < spatial; ++s) plane[s] = g;
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Gradient checking

GradCheckReport grad_check_report(const std::function<double(ParamStore&)>& loss_fn,
                                  ParamStore& store, double step) {
  store.zero_grads();
  const double base = loss_fn(store);
  if (!std::isfinite(base)) {
    throw NumericError("grad_check: loss is not finite at the evaluation point");
  }
  std::vector<Tensor> analytic;
  analytic.reserve(store.count());
  for (ParamRef ref : store.refs()) analytic.push_back(store.grad(ref));

  GradCheckReport report;
  for (ParamRef ref : store.refs()) {
    if (!store.trainable(ref)) continue;
    Tensor& value = store.value(ref);
    const Tensor& a = analytic[ref.index];
    for (std::int64_t i = 0; i < value.size(); ++i) {
      const double original = value.data()[i];
      value.data()[i] = original + step;
      store.zero_grads();
      const double plus = loss_fn(store);
      value.data()[i] = original - step;
      store.zero_grads();
      const double minus = loss_fn(store);
      value.data()[i] = original;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw NumericError("grad_check: loss not finite while perturbing " + store.name(ref));
      }
      const double numeric = (plus - minus) / (2.0 * step);
      const double analytic_v = a.data()[i];
      const double denom =
          std::max(std::max(std::abs(analytic_v), std::abs(numeric)), 1e-8);
      const double rel = std::abs(analytic_v - numeric) / denom;
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_param = store.name(ref);
        report.worst_flat_index = i;
        report.worst_analytic = analytic_v;
        report.worst_numeric = numeric;
      }
    }
  }
  store.zero_grads();
  return report;
}

double grad_check(const std::function<double(ParamStore&)>& loss_fn, ParamStore& store,
                  double step) {
  return grad_check_report(loss_fn, store, step).max_relative_error;
}

}  // namespace flexkd
