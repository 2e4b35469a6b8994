#include "flexkd/models.hpp"

#include <algorithm>
#include <cmath>

namespace flexkd {

namespace {

constexpr std::int64_t kConvKernel = 3;
constexpr std::int64_t kPoolKernel = 2;
constexpr std::int64_t kPoolStride = 2;

std::string block_name(std::size_t b) { return "block" + std::to_string(b + 1); }

}  // namespace

void ModelConfig::validate() const {
  if (family != "early_exit" && family != "slimmable") {
    throw ConfigError("model.family must be 'early_exit' or 'slimmable', got '" + family + "'");
  }
  if (classes < 2) {
    throw ConfigError("model.classes must be at least 2, got " + std::to_string(classes));
  }
  if (blocks.empty()) {
    throw ConfigError("model.blocks must name at least one block");
  }
  for (std::int64_t bsize : blocks) {
    if (bsize < 1) {
      throw ConfigError("model.blocks entries must be positive, got " + std::to_string(bsize));
    }
  }
  if (block == BlockKind::kDense) {
    if (input.features < 1) {
      throw ConfigError("dense models need model.input.features >= 1");
    }
  } else {
    if (input.channels < 1 || input.height < 1 || input.width < 1) {
      throw ConfigError("conv models need model.input channels/height/width >= 1");
    }
  }
  if (family == "early_exit") {
    if (!widths.empty()) {
      throw ConfigError("model.widths is only valid for the slimmable family");
    }
  } else {
    if (widths.empty()) {
      throw ConfigError("slimmable models need a non-empty model.widths list");
    }
    double prev = 0.0;
    for (double w : widths) {
      if (!(w > prev)) {
        throw ConfigError("model.widths must be strictly ascending");
      }
      if (!(w > 0.0 && w <= 1.0)) {
        throw ConfigError("model.widths entries must lie in (0, 1]");
      }
      prev = w;
    }
    if (widths.back() != 1.0) {
      throw ConfigError("the last width multiplier must be exactly 1.0");
    }
  }
  if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0)) {
    throw ConfigError("model.bn_momentum must lie in [0, 1]");
  }
  if (!(bn_epsilon > 0.0)) {
    throw ConfigError("model.bn_epsilon must be positive");
  }
}

std::int64_t ModelConfig::n_sub_models() const {
  return family == "slimmable" ? static_cast<std::int64_t>(widths.size())
                               : static_cast<std::int64_t>(blocks.size());
}

std::int64_t slimmed_extent(double multiplier, std::int64_t full) {
  // The small backoff keeps exact products (0.75 * 16) from being pushed up a
  // channel by representation noise.
  const auto c = static_cast<std::int64_t>(
      std::ceil(multiplier * static_cast<double>(full) - 1e-9));
  return std::max<std::int64_t>(1, c);
}

std::int64_t ParamSlice::scalar_count() const {
  std::int64_t n = 1;
  for (std::int64_t e : active_extents) n *= e;
  return n;
}

std::int64_t FlexibleModel::param_count(std::int64_t i) const {
  std::int64_t total = 0;
  for (const ParamSlice& slice : param_slices(i)) total += slice.scalar_count();
  return total;
}

void FlexibleModel::check_index(std::int64_t i) const {
  if (i < 1 || i > n()) {
    throw ValueError("sub-model index " + std::to_string(i) + " out of range [1, " +
                     std::to_string(n()) + "]");
  }
}

// ---------------------------------------------------------------------------
// EarlyExitNet

EarlyExitNet::EarlyExitNet(const ModelConfig& cfg, RngState& rng) : cfg_(cfg) {
  cfg_.validate();
  if (cfg_.family != "early_exit") {
    throw ConfigError("EarlyExitNet requires family 'early_exit'");
  }
  const std::size_t nb = cfg_.blocks.size();
  if (cfg_.block == BlockKind::kDense) {
    std::int64_t prev = cfg_.input.features;
    for (std::size_t b = 0; b < nb; ++b) {
      const std::int64_t hidden = cfg_.blocks[b];
      fcs_.emplace_back(store_, block_name(b) + ".fc", prev, hidden, rng);
      bns_.emplace_back(store_, block_name(b) + ".bn", hidden, cfg_.bn_momentum, cfg_.bn_epsilon);
      exits_.emplace_back(store_, "exit" + std::to_string(b + 1) + ".fc", hidden, cfg_.classes,
                          rng);
      prev = hidden;
    }
    pool_after_.assign(nb, false);
  } else {
    std::int64_t prev_ch = cfg_.input.channels;
    std::int64_t h = cfg_.input.height;
    std::int64_t w = cfg_.input.width;
    for (std::size_t b = 0; b < nb; ++b) {
      const std::int64_t ch = cfg_.blocks[b];
      convs_.emplace_back(store_, block_name(b) + ".conv", prev_ch, ch, kConvKernel, 1, 1, rng);
      h = convs_.back().out_extent(h);
      w = convs_.back().out_extent(w);
      bns_.emplace_back(store_, block_name(b) + ".bn", ch, cfg_.bn_momentum, cfg_.bn_epsilon);
      // Halve the spatial grid while it is at least 4 wide.
      const bool pool = std::min(h, w) >= 2 * kPoolKernel;
      pool_after_.push_back(pool);
      if (pool) {
        h = (h - kPoolKernel) / kPoolStride + 1;
        w = (w - kPoolKernel) / kPoolStride + 1;
      }
      exits_.emplace_back(store_, "exit" + std::to_string(b + 1) + ".fc", ch, cfg_.classes, rng);
      prev_ch = ch;
    }
  }
  trace_.resize(nb);
}

void EarlyExitNet::check_input(const Tensor& input) const {
  if (cfg_.block == BlockKind::kDense) {
    if (input.rank() != 2 || input.extent(1) != cfg_.input.features) {
      throw ShapeError("input " + shape_str(input.shape()) + " does not match dense signature [N," +
                       std::to_string(cfg_.input.features) + "]");
    }
  } else {
    if (input.rank() != 4 || input.extent(1) != cfg_.input.channels ||
        input.extent(2) != cfg_.input.height || input.extent(3) != cfg_.input.width) {
      throw ShapeError("input " + shape_str(input.shape()) + " does not match conv signature [N," +
                       std::to_string(cfg_.input.channels) + "," +
                       std::to_string(cfg_.input.height) + "," + std::to_string(cfg_.input.width) +
                       "]");
    }
  }
}

Tensor EarlyExitNet::block_forward(std::size_t b, const Tensor& x, Mode mode, BlockTrace* trace) {
  ++blocks_executed_;
  Tensor y;
  if (cfg_.block == BlockKind::kDense) {
    y = fcs_[b].forward(store_, x, -1, -1, trace != nullptr ? &trace->fc : nullptr);
  } else {
    y = convs_[b].forward(store_, x, -1, -1, trace != nullptr ? &trace->conv : nullptr);
  }
  y = bns_[b].forward(store_, y, mode, trace != nullptr ? &trace->bn : nullptr);
  y = relu_forward(y, trace != nullptr ? &trace->relu : nullptr);
  if (cfg_.block == BlockKind::kConv && pool_after_[b]) {
    y = avg_pool2d_forward(y, kPoolKernel, kPoolStride, trace != nullptr ? &trace->pool : nullptr);
  }
  return y;
}

Tensor EarlyExitNet::exit_forward(std::size_t b, const Tensor& block_out, BlockTrace* trace) {
  if (cfg_.block == BlockKind::kDense) {
    return exits_[b].forward(store_, block_out, -1, -1,
                             trace != nullptr ? &trace->exit_fc : nullptr);
  }
  const Tensor pooled =
      global_avg_pool_forward(block_out, trace != nullptr ? &trace->gap : nullptr);
  return exits_[b].forward(store_, pooled, -1, -1, trace != nullptr ? &trace->exit_fc : nullptr);
}

Tensor EarlyExitNet::exit_backward(std::size_t b, const Tensor& logit_grad, BlockTrace& trace) {
  Tensor g = exits_[b].backward(store_, trace.exit_fc, logit_grad);
  if (cfg_.block == BlockKind::kConv) {
    g = global_avg_pool_backward(trace.gap, g);
  }
  return g;
}

Tensor EarlyExitNet::block_backward(std::size_t b, const Tensor& out_grad, BlockTrace& trace) {
  Tensor g = out_grad;
  if (cfg_.block == BlockKind::kConv && pool_after_[b]) {
    g = avg_pool2d_backward(trace.pool, g);
  }
  g = relu_backward(trace.relu, g);
  g = bns_[b].backward(store_, trace.bn, g);
  if (cfg_.block == BlockKind::kDense) {
    return fcs_[b].backward(store_, trace.fc, g);
  }
  return convs_[b].backward(store_, trace.conv, g);
}

std::vector<Tensor> EarlyExitNet::forward_all(const Tensor& input, Mode mode) {
  check_input(input);
  blocks_executed_ = 0;
  const std::size_t nb = cfg_.blocks.size();
  trace_.assign(nb, BlockTrace{});
  std::vector<Tensor> logits;
  logits.reserve(nb);
  Tensor x = input;
  for (std::size_t b = 0; b < nb; ++b) {
    BlockTrace* trace = mode == Mode::kTrain ? &trace_[b] : nullptr;
    x = block_forward(b, x, mode, trace);
    logits.push_back(exit_forward(b, x, trace));
  }
  trace_valid_ = mode == Mode::kTrain;
  return logits;
}

Tensor EarlyExitNet::forward_one(const Tensor& input, std::int64_t i, Mode mode) {
  check_index(i);
  check_input(input);
  blocks_executed_ = 0;
  trace_valid_ = false;
  Tensor x = input;
  for (std::size_t b = 0; b < static_cast<std::size_t>(i); ++b) {
    x = block_forward(b, x, mode, nullptr);
  }
  return exit_forward(static_cast<std::size_t>(i - 1), x, nullptr);
}

void EarlyExitNet::backward_all(const std::vector<Tensor>& logit_grads) {
  if (!trace_valid_) {
    throw ValueError("backward_all needs a preceding train-mode forward_all");
  }
  if (logit_grads.size() != cfg_.blocks.size()) {
    throw ShapeError("expected " + std::to_string(cfg_.blocks.size()) +
                     " logit gradients, got " + std::to_string(logit_grads.size()));
  }
  const std::size_t nb = cfg_.blocks.size();
  Tensor down;
  for (std::size_t bi = nb; bi-- > 0;) {
    Tensor g = exit_backward(bi, logit_grads[bi], trace_[bi]);
    if (bi + 1 < nb) g = add(g, down);
    down = block_backward(bi, g, trace_[bi]);
  }
  trace_valid_ = false;
}

std::vector<ParamSlice> EarlyExitNet::param_slices(std::int64_t i) const {
  check_index(i);
  std::vector<ParamSlice> out;
  auto push_full = [&](const std::string& name) {
    const ParamRef ref = store_.find(name);
    out.push_back(ParamSlice{name, store_.value(ref).shape(), true});
  };
  // Sub-model i owns blocks 1..i and every exit head up to i, so the
  // anytime-deployable prefix stays self-contained and sets nest with i.
  for (std::int64_t b = 1; b <= i; ++b) {
    const std::string stem = "block" + std::to_string(b);
    push_full(stem + (cfg_.block == BlockKind::kDense ? ".fc" : ".conv") + ".weight");
    push_full(stem + (cfg_.block == BlockKind::kDense ? ".fc" : ".conv") + ".bias");
    push_full(stem + ".bn.gamma");
    push_full(stem + ".bn.beta");
    push_full("exit" + std::to_string(b) + ".fc.weight");
    push_full("exit" + std::to_string(b) + ".fc.bias");
  }
  return out;
}

// ---------------------------------------------------------------------------
// SlimmableNet

SlimmableNet::SlimmableNet(const ModelConfig& cfg, RngState& rng) : cfg_(cfg) {
  cfg_.validate();
  if (cfg_.family != "slimmable") {
    throw ConfigError("SlimmableNet requires family 'slimmable'");
  }
  const std::size_t nb = cfg_.blocks.size();
  const std::size_t nw = cfg_.widths.size();

  active_.assign(nw, std::vector<std::int64_t>(nb, 0));
  for (std::size_t k = 0; k < nw; ++k) {
    for (std::size_t b = 0; b < nb; ++b) {
      active_[k][b] = slimmed_extent(cfg_.widths[k], cfg_.blocks[b]);
    }
  }

  std::int64_t prev = cfg_.block == BlockKind::kDense ? cfg_.input.features : cfg_.input.channels;
  std::int64_t h = cfg_.input.height;
  std::int64_t w = cfg_.input.width;
  for (std::size_t b = 0; b < nb; ++b) {
    const std::int64_t full = cfg_.blocks[b];
    if (cfg_.block == BlockKind::kDense) {
      fcs_.emplace_back(store_, block_name(b) + ".fc", prev, full, rng);
    } else {
      convs_.emplace_back(store_, block_name(b) + ".conv", prev, full, kConvKernel, 1, 1, rng);
      h = convs_.back().out_extent(h);
      w = convs_.back().out_extent(w);
      const bool pool = std::min(h, w) >= 2 * kPoolKernel;
      pool_after_.push_back(pool);
      if (pool) {
        h = (h - kPoolKernel) / kPoolStride + 1;
        w = (w - kPoolKernel) / kPoolStride + 1;
      }
    }
    if (cfg_.shared_bn_affine) {
      shared_gamma_.push_back(store_.add(block_name(b) + ".bn.gamma", Tensor::full({full}, 1.0)));
      shared_beta_.push_back(store_.add(block_name(b) + ".bn.beta", Tensor::zeros({full})));
    }
    bn_banks_.emplace_back();
    for (std::size_t k = 0; k < nw; ++k) {
      const std::string name = block_name(b) + ".bn" + std::to_string(k + 1);
      if (cfg_.shared_bn_affine) {
        bn_banks_.back().emplace_back(store_, name, active_[k][b], cfg_.bn_momentum,
                                      cfg_.bn_epsilon, shared_gamma_[b], shared_beta_[b]);
      } else {
        bn_banks_.back().emplace_back(store_, name, active_[k][b], cfg_.bn_momentum,
                                      cfg_.bn_epsilon);
      }
    }
    prev = full;
  }
  head_ = std::make_unique<LinearLayer>(store_, "head.fc", cfg_.blocks.back(), cfg_.classes, rng);
  trace_.resize(nw);
}

std::int64_t SlimmableNet::active_extent(std::size_t width_idx, std::size_t block) const {
  return active_.at(width_idx).at(block);
}

void SlimmableNet::check_input(const Tensor& input) const {
  if (cfg_.block == BlockKind::kDense) {
    if (input.rank() != 2 || input.extent(1) != cfg_.input.features) {
      throw ShapeError("input " + shape_str(input.shape()) + " does not match dense signature [N," +
                       std::to_string(cfg_.input.features) + "]");
    }
  } else {
    if (input.rank() != 4 || input.extent(1) != cfg_.input.channels ||
        input.extent(2) != cfg_.input.height || input.extent(3) != cfg_.input.width) {
      throw ShapeError("input " + shape_str(input.shape()) + " does not match conv signature");
    }
  }
}

Tensor SlimmableNet::forward_width(const Tensor& input, std::size_t k, Mode mode,
                                   WidthTrace* trace) {
  const std::size_t nb = cfg_.blocks.size();
  if (trace != nullptr) {
    trace->fc.assign(nb, LinearLayer::Context{});
    trace->conv.assign(nb, Conv2dLayer::Context{});
    trace->bn.assign(nb, BatchNormLayer::Context{});
    trace->relu.assign(nb, ReluContext{});
    trace->pool.assign(nb, AvgPool2dContext{});
    trace->gap = GlobalAvgPoolContext{};
    trace->head = LinearLayer::Context{};
  }
  Tensor x = input;
  std::int64_t in_active =
      cfg_.block == BlockKind::kDense ? cfg_.input.features : cfg_.input.channels;
  for (std::size_t b = 0; b < nb; ++b) {
    ++blocks_executed_;
    const std::int64_t out_active = active_[k][b];
    if (cfg_.block == BlockKind::kDense) {
      x = fcs_[b].forward(store_, x, in_active, out_active,
                          trace != nullptr ? &trace->fc[b] : nullptr);
    } else {
      x = convs_[b].forward(store_, x, in_active, out_active,
                            trace != nullptr ? &trace->conv[b] : nullptr);
    }
    x = bn_banks_[b][k].forward(store_, x, mode, trace != nullptr ? &trace->bn[b] : nullptr);
    x = relu_forward(x, trace != nullptr ? &trace->relu[b] : nullptr);
    if (cfg_.block == BlockKind::kConv && pool_after_[b]) {
      x = avg_pool2d_forward(x, kPoolKernel, kPoolStride,
                             trace != nullptr ? &trace->pool[b] : nullptr);
    }
    in_active = out_active;
  }
  if (cfg_.block == BlockKind::kConv) {
    x = global_avg_pool_forward(x, trace != nullptr ? &trace->gap : nullptr);
  }
  return head_->forward(store_, x, active_[k].back(), cfg_.classes,
                        trace != nullptr ? &trace->head : nullptr);
}

void SlimmableNet::backward_width(std::size_t k, const Tensor& logit_grad, WidthTrace& trace) {
  Tensor g = head_->backward(store_, trace.head, logit_grad);
  if (cfg_.block == BlockKind::kConv) {
    g = global_avg_pool_backward(trace.gap, g);
  }
  const std::size_t nb = cfg_.blocks.size();
  for (std::size_t bi = nb; bi-- > 0;) {
    if (cfg_.block == BlockKind::kConv && pool_after_[bi]) {
      g = avg_pool2d_backward(trace.pool[bi], g);
    }
    g = relu_backward(trace.relu[bi], g);
    g = bn_banks_[bi][k].backward(store_, trace.bn[bi], g);
    if (cfg_.block == BlockKind::kDense) {
      g = fcs_[bi].backward(store_, trace.fc[bi], g);
    } else {
      g = convs_[bi].backward(store_, trace.conv[bi], g);
    }
  }
}

std::vector<Tensor> SlimmableNet::forward_all(const Tensor& input, Mode mode) {
  check_input(input);
  blocks_executed_ = 0;
  const std::size_t nw = cfg_.widths.size();
  trace_.assign(nw, WidthTrace{});
  std::vector<Tensor> logits;
  logits.reserve(nw);
  for (std::size_t k = 0; k < nw; ++k) {
    logits.push_back(forward_width(input, k, mode, mode == Mode::kTrain ? &trace_[k] : nullptr));
  }
  trace_valid_ = mode == Mode::kTrain;
  return logits;
}

Tensor SlimmableNet::forward_one(const Tensor& input, std::int64_t i, Mode mode) {
  check_index(i);
  check_input(input);
  blocks_executed_ = 0;
  trace_valid_ = false;
  return forward_width(input, static_cast<std::size_t>(i - 1), mode, nullptr);
}

void SlimmableNet::backward_all(const std::vector<Tensor>& logit_grads) {
  if (!trace_valid_) {
    throw ValueError("backward_all needs a preceding train-mode forward_all");
  }
  if (logit_grads.size() != cfg_.widths.size()) {
    throw ShapeError("expected " + std::to_string(cfg_.widths.size()) + " logit gradients, got " +
                     std::to_string(logit_grads.size()));
  }
  for (std::size_t k = 0; k < cfg_.widths.size(); ++k) {
    backward_width(k, logit_grads[k], trace_[k]);
  }
  trace_valid_ = false;
}

std::vector<ParamSlice> SlimmableNet::param_slices(std::int64_t i) const {
  check_index(i);
  const std::size_t k = static_cast<std::size_t>(i - 1);
  const std::size_t nb = cfg_.blocks.size();
  std::vector<ParamSlice> out;
  std::int64_t prev = cfg_.block == BlockKind::kDense ? cfg_.input.features : cfg_.input.channels;
  for (std::size_t b = 0; b < nb; ++b) {
    const std::int64_t act = active_[k][b];
    const std::string stem =
        block_name(b) + (cfg_.block == BlockKind::kDense ? ".fc" : ".conv");
    if (cfg_.block == BlockKind::kDense) {
      out.push_back(ParamSlice{stem + ".weight", {act, prev}, true});
    } else {
      out.push_back(ParamSlice{stem + ".weight", {act, prev, kConvKernel, kConvKernel}, true});
    }
    out.push_back(ParamSlice{stem + ".bias", {act}, true});
    if (cfg_.shared_bn_affine) {
      out.push_back(ParamSlice{block_name(b) + ".bn.gamma", {act}, true});
      out.push_back(ParamSlice{block_name(b) + ".bn.beta", {act}, true});
    } else {
      const std::string bn = block_name(b) + ".bn" + std::to_string(i);
      out.push_back(ParamSlice{bn + ".gamma", {act}, false});
      out.push_back(ParamSlice{bn + ".beta", {act}, false});
    }
    prev = act;
  }
  out.push_back(ParamSlice{"head.fc.weight", {cfg_.classes, active_[k].back()}, true});
  out.push_back(ParamSlice{"head.fc.bias", {cfg_.classes}, true});
  return out;
}

std::unique_ptr<FlexibleModel> build_model(const ModelConfig& cfg, RngState& rng) {
  cfg.validate();
  if (cfg.family == "slimmable") {
    return std::make_unique<SlimmableNet>(cfg, rng);
  }
  return std::make_unique<EarlyExitNet>(cfg, rng);
}

}  // namespace flexkd
