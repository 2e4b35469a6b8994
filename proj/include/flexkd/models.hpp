#pragma once

#include <memory>
#include <string>
#include <vector>

#include "flexkd/layers.hpp"
#include "flexkd/rng.hpp"

namespace flexkd {

enum class BlockKind { kDense, kConv };

/// Input signature: dense models take [batch x features], convolutional ones
/// take [batch x channels x height x width].
struct InputSpec {
  std::int64_t features = 0;
  std::int64_t channels = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;

  bool is_dense() const { return features > 0; }
};

struct ModelConfig {
  std::string family;  // "early_exit" | "slimmable"
  BlockKind block = BlockKind::kDense;
  std::int64_t classes = 0;
  InputSpec input;
  /// Per-block full sizes: hidden units for dense blocks, channels for conv.
  std::vector<std::int64_t> blocks;
  /// Slimmable width multipliers, strictly ascending in (0, 1], last 1.0.
  std::vector<double> widths;
  /// Share one full-width gamma/beta pair across widths (running moments stay
  /// private either way).
  bool shared_bn_affine = false;
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;

  void validate() const;
  std::int64_t n_sub_models() const;
};

/// ceil(multiplier * full), guarded against representation noise, >= 1.
std::int64_t slimmed_extent(double multiplier, std::int64_t full);

/// One trainable parameter as seen by one sub-model: the leading slice of each
/// axis it actually reaches. `shared` is false for state private to a single
/// sub-model (per-width batch-norm banks).
struct ParamSlice {
  std::string name;
  std::vector<std::int64_t> active_extents;
  bool shared = true;

  std::int64_t scalar_count() const;
};

/// A model exposing n nested sub-models ordered by size. One train-mode
/// forward_all keeps the reverse-mode contexts consumed by the next
/// backward_all.
class FlexibleModel {
 public:
  virtual ~FlexibleModel() = default;

  virtual std::int64_t n() const = 0;
  /// Column prefix for metrics: "exit" for early-exit, "switch" for slimmable.
  virtual std::string sub_model_label() const = 0;
  virtual const ModelConfig& config() const = 0;

  /// Logits for every sub-model from one shared pass, ordered smallest first.
  virtual std::vector<Tensor> forward_all(const Tensor& input, Mode mode) = 0;
  /// Logits of sub-model i (1-based), touching only what it needs.
  virtual Tensor forward_one(const Tensor& input, std::int64_t i, Mode mode) = 0;
  /// Accumulates parameter gradients for the given d loss / d logits, one per
  /// sub-model, using the contexts of the last train-mode forward_all.
  virtual void backward_all(const std::vector<Tensor>& logit_grads) = 0;

  /// Trainable parameters reachable by sub-model i with their active slices.
  virtual std::vector<ParamSlice> param_slices(std::int64_t i) const = 0;
  /// Scalar count over param_slices(i); monotone nondecreasing in i.
  std::int64_t param_count(std::int64_t i) const;

  /// Backbone block evaluations performed by the most recent forward call.
  std::int64_t blocks_executed() const { return blocks_executed_; }

  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }

 protected:
  void check_index(std::int64_t i) const;

  ParamStore store_;
  std::int64_t blocks_executed_ = 0;
};

/// Chain network with a classifier after every block: sub-model i runs blocks
/// 1..i plus exit head i, so inference can stop at any depth.
class EarlyExitNet : public FlexibleModel {
 public:
  EarlyExitNet(const ModelConfig& cfg, RngState& rng);

  std::int64_t n() const override { return static_cast<std::int64_t>(cfg_.blocks.size()); }
  std::string sub_model_label() const override { return "exit"; }
  const ModelConfig& config() const override { return cfg_; }

  std::vector<Tensor> forward_all(const Tensor& input, Mode mode) override;
  Tensor forward_one(const Tensor& input, std::int64_t i, Mode mode) override;
  void backward_all(const std::vector<Tensor>& logit_grads) override;
  std::vector<ParamSlice> param_slices(std::int64_t i) const override;

 private:
  struct BlockTrace {
    LinearLayer::Context fc;
    Conv2dLayer::Context conv;
    BatchNormLayer::Context bn;
    ReluContext relu;
    AvgPool2dContext pool;
    GlobalAvgPoolContext gap;
    LinearLayer::Context exit_fc;
  };

  Tensor block_forward(std::size_t b, const Tensor& x, Mode mode, BlockTrace* trace);
  Tensor exit_forward(std::size_t b, const Tensor& block_out, BlockTrace* trace);
  Tensor exit_backward(std::size_t b, const Tensor& logit_grad, BlockTrace& trace);
  Tensor block_backward(std::size_t b, const Tensor& out_grad, BlockTrace& trace);
  void check_input(const Tensor& input) const;

  ModelConfig cfg_;
  std::vector<LinearLayer> fcs_;
  std::vector<Conv2dLayer> convs_;
  std::vector<BatchNormLayer> bns_;
  std::vector<LinearLayer> exits_;
  std::vector<bool> pool_after_;
  std::vector<BlockTrace> trace_;
  bool trace_valid_ = false;
};

/// Width-sliced network: every sub-model runs the leading channels of one
/// shared parameter stack, with a private batch-norm bank per width.
class SlimmableNet : public FlexibleModel {
 public:
  SlimmableNet(const ModelConfig& cfg, RngState& rng);

  std::int64_t n() const override { return static_cast<std::int64_t>(cfg_.widths.size()); }
  std::string sub_model_label() const override { return "switch"; }
  const ModelConfig& config() const override { return cfg_; }

  std::vector<Tensor> forward_all(const Tensor& input, Mode mode) override;
  Tensor forward_one(const Tensor& input, std::int64_t i, Mode mode) override;
  void backward_all(const std::vector<Tensor>& logit_grads) override;
  std::vector<ParamSlice> param_slices(std::int64_t i) const override;

  /// Active channels of block b (0-based) at width index k (0-based).
  std::int64_t active_extent(std::size_t width_idx, std::size_t block) const;

 private:
  struct WidthTrace {
    std::vector<LinearLayer::Context> fc;
    std::vector<Conv2dLayer::Context> conv;
    std::vector<BatchNormLayer::Context> bn;
    std::vector<ReluContext> relu;
    std::vector<AvgPool2dContext> pool;
    GlobalAvgPoolContext gap;
    LinearLayer::Context head;
  };

  Tensor forward_width(const Tensor& input, std::size_t k, Mode mode, WidthTrace* trace);
  void backward_width(std::size_t k, const Tensor& logit_grad, WidthTrace& trace);
  void check_input(const Tensor& input) const;

  ModelConfig cfg_;
  std::vector<LinearLayer> fcs_;
  std::vector<Conv2dLayer> convs_;
  std::vector<std::vector<BatchNormLayer>> bn_banks_;  // [block][width]
  std::vector<ParamRef> shared_gamma_;                 // per block, when shared_bn_affine
  std::vector<ParamRef> shared_beta_;
  std::unique_ptr<LinearLayer> head_;
  std::vector<bool> pool_after_;
  std::vector<std::vector<std::int64_t>> active_;  // active_[width][block]
  std::vector<WidthTrace> trace_;
  bool trace_valid_ = false;
};

std::unique_ptr<FlexibleModel> build_model(const ModelConfig& cfg, RngState& rng);

}  // namespace flexkd
