#include "flexkd/losses.hpp"

#include <cmath>

#include "flexkd/errors.hpp"

namespace flexkd {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kNone: return "NONE";
    case Strategy::kIpkd: return "IPKD";
    case Strategy::kTa1: return "TA1";
    case Strategy::kTaM: return "TAM";
  }
  return "NONE";
}

std::string to_string(Divergence d) { return d == Divergence::kKl ? "KL" : "CE"; }

std::string to_string(KlOrder o) {
  return o == KlOrder::kStudentFirst ? "student_first" : "teacher_first";
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "NONE") return Strategy::kNone;
  if (s == "IPKD") return Strategy::kIpkd;
  if (s == "TA1") return Strategy::kTa1;
  if (s == "TAM") return Strategy::kTaM;
  throw ConfigError("unknown strategy '" + s + "' (expected NONE, IPKD, TA1 or TAM)");
}

Divergence divergence_from_string(const std::string& s) {
  if (s == "KL") return Divergence::kKl;
  if (s == "CE") return Divergence::kCe;
  throw ConfigError("unknown divergence '" + s + "' (expected KL or CE)");
}

KlOrder kl_order_from_string(const std::string& s) {
  if (s == "student_first") return KlOrder::kStudentFirst;
  if (s == "teacher_first") return KlOrder::kTeacherFirst;
  throw ConfigError("unknown kl_order '" + s + "' (expected student_first or teacher_first)");
}

void DistillConfig::validate() const {
  if (!(tau > 0.0)) {
    throw ValueError("distill.tau must be positive, got " + std::to_string(tau));
  }
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ValueError("distill.lambda must lie in [0, 1], got " + std::to_string(lambda));
  }
}

void LogitsBundle::validate() const {
  if (logits.empty()) {
    throw ValueError("logits bundle must hold at least one sub-model");
  }
  if (labels.rank() != 2) {
    throw ValueError("labels must be a [batch x classes] one-hot tensor, got " +
                     shape_str(labels.shape()));
  }
  const std::int64_t batch = labels.extent(0);
  const std::int64_t classes = labels.extent(1);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (logits[i].rank() != 2 || logits[i].extent(0) != batch || logits[i].extent(1) != classes) {
      throw ShapeError("sub-model " + std::to_string(i + 1) + " logits " +
                       shape_str(logits[i].shape()) + " do not match labels " +
                       shape_str(labels.shape()));
    }
  }
  validate_one_hot(labels);
}

void validate_one_hot(const Tensor& labels) {
  if (labels.rank() != 2) {
    throw ValueError("labels must be a [batch x classes] one-hot tensor, got " +
                     shape_str(labels.shape()));
  }
  const std::int64_t batch = labels.extent(0);
  const std::int64_t classes = labels.extent(1);
  const double* yd = labels.data();
  for (std::int64_t r = 0; r < batch; ++r) {
    int ones = 0;
    for (std::int64_t c = 0; c < classes; ++c) {
      const double v = yd[r * classes + c];
      if (v == 1.0) {
        ++ones;
      } else if (v != 0.0) {
        throw ValueError("labels row " + std::to_string(r) + " is not one-hot (entry " +
                         std::to_string(v) + ")");
      }
    }
    if (ones != 1) {
      throw ValueError("labels row " + std::to_string(r) + " is not one-hot (" +
                       std::to_string(ones) + " ones)");
    }
  }
}

namespace {

// Row-wise log-softmax of logits / tau, max-shifted. Output shape matches.
Tensor log_softmax_rows(const Tensor& logits, double tau) {
  const std::int64_t batch = logits.extent(0);
  const std::int64_t classes = logits.extent(1);
  Tensor out(logits.shape());
  const double* xd = logits.data();
  double* od = out.data();
  for (std::int64_t r = 0; r < batch; ++r) {
    const double* row = xd + r * classes;
    double* orow = od + r * classes;
    double mx = row[0] / tau;
    for (std::int64_t c = 1; c < classes; ++c) mx = std::max(mx, row[c] / tau);
    double sum = 0.0;
    for (std::int64_t c = 0; c < classes; ++c) {
      orow[c] = row[c] / tau - mx;
      sum += std::exp(orow[c]);
    }
    const double lse = std::log(sum);
    for (std::int64_t c = 0; c < classes; ++c) orow[c] -= lse;
  }
  return out;
}

void require_same_2d(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rank() != 2 || !a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " must be equal [batch x classes]");
  }
}

}  // namespace

double cross_entropy(const Tensor& logits, const Tensor& onehot_labels, Tensor* grad) {
  require_same_2d(logits, onehot_labels, "cross_entropy");
  validate_one_hot(onehot_labels);

  const std::int64_t batch = logits.extent(0);
  const std::int64_t classes = logits.extent(1);
  const Tensor ls = log_softmax_rows(logits, 1.0);
  const double* lsd = ls.data();
  const double* yd = onehot_labels.data();

  double total = 0.0;
  for (std::int64_t r = 0; r < batch; ++r) {
    double row = 0.0;
    for (std::int64_t c = 0; c < classes; ++c) {
      if (yd[r * classes + c] == 1.0) row -= lsd[r * classes + c];
    }
    total += row;
  }
  total /= static_cast<double>(batch);

  if (grad != nullptr) {
    *grad = Tensor(logits.shape());
    double* gd = grad->data();
    const double inv_b = 1.0 / static_cast<double>(batch);
    for (std::int64_t i = 0; i < logits.size(); ++i) {
      gd[i] = (std::exp(lsd[i]) - yd[i]) * inv_b;
    }
  }
  return total;
}

double kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, double tau,
               Divergence divergence, KlOrder kl_order, Tensor* grad_student,
               Tensor* grad_teacher) {
  if (!(tau > 0.0)) {
    throw ValueError("kd_loss: tau must be positive, got " + std::to_string(tau));
  }
  require_same_2d(student_logits, teacher_logits, "kd_loss");

  const std::int64_t batch = student_logits.extent(0);
  const std::int64_t classes = student_logits.extent(1);
  const Tensor ls = log_softmax_rows(student_logits, tau);
  const Tensor lt = log_softmax_rows(teacher_logits, tau);
  const double* lsd = ls.data();
  const double* ltd = lt.data();

  if (grad_student != nullptr) *grad_student = Tensor(student_logits.shape());
  if (grad_teacher != nullptr) *grad_teacher = Tensor(teacher_logits.shape());
  double* gs = grad_student != nullptr ? grad_student->data() : nullptr;
  double* gt = grad_teacher != nullptr ? grad_teacher->data() : nullptr;

  // tau^2 prefactor and 1/tau from the chain rule through logits/tau.
  const double gscale = tau / static_cast<double>(batch);
  double total = 0.0;

  for (std::int64_t r = 0; r < batch; ++r) {
    const std::int64_t base = r * classes;
    double row = 0.0;
    if (divergence == Divergence::kKl && kl_order == KlOrder::kStudentFirst) {
      for (std::int64_t c = 0; c < classes; ++c) {
        row += std::exp(lsd[base + c]) * (lsd[base + c] - ltd[base + c]);
      }
      if (gs != nullptr) {
        for (std::int64_t c = 0; c < classes; ++c) {
          const double p = std::exp(lsd[base + c]);
          gs[base + c] = gscale * p * ((lsd[base + c] - ltd[base + c]) - row);
        }
      }
      if (gt != nullptr) {
        for (std::int64_t c = 0; c < classes; ++c) {
          gt[base + c] = gscale * (std::exp(ltd[base + c]) - std::exp(lsd[base + c]));
        }
      }
    } else if (divergence == Divergence::kKl) {  // teacher-first
      for (std::int64_t c = 0; c < classes; ++c) {
        row += std::exp(ltd[base + c]) * (ltd[base + c] - lsd[base + c]);
      }
      if (gs != nullptr) {
        for (std::int64_t c = 0; c < classes; ++c) {
          gs[base + c] = gscale * (std::exp(lsd[base + c]) - std::exp(ltd[base + c]));
        }
      }
      if (gt != nullptr) {
        for (std::int64_t c = 0; c < classes; ++c) {
          const double q = std::exp(ltd[base + c]);
          gt[base + c] = gscale * q * ((ltd[base + c] - lsd[base + c]) - row);
        }
      }
    } else {  // cross-entropy with the teacher distribution as target
      for (std::int64_t c = 0; c < classes; ++c) {
        row -= std::exp(ltd[base + c]) * lsd[base + c];
      }
      if (gs != nullptr) {
        for (std::int64_t c = 0; c < classes; ++c) {
          gs[base + c] = gscale * (std::exp(lsd[base + c]) - std::exp(ltd[base + c]));
        }
      }
      if (gt != nullptr) {
        for (std::int64_t c = 0; c < classes; ++c) {
          const double q = std::exp(ltd[base + c]);
          gt[base + c] = gscale * q * (-row - lsd[base + c]);
        }
      }
    }
    total += row;
  }
  return tau * tau * total / static_cast<double>(batch);
}

double student_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                    const Tensor& onehot_labels, const DistillConfig& cfg, Tensor* grad_student) {
  cfg.validate();
  Tensor ce_grad;
  Tensor kd_grad;
  const double ce =
      cross_entropy(student_logits, onehot_labels, grad_student != nullptr ? &ce_grad : nullptr);
  const double kd = kd_loss(student_logits, teacher_logits, cfg.tau, cfg.divergence, cfg.kl_order,
                            grad_student != nullptr ? &kd_grad : nullptr, nullptr);
  if (grad_student != nullptr) {
    *grad_student = add(scale(ce_grad, 1.0 - cfg.lambda), scale(kd_grad, cfg.lambda));
  }
  return (1.0 - cfg.lambda) * ce + cfg.lambda * kd;
}

namespace {

void add_scaled_into(Tensor& acc, const Tensor& g, double w) {
  double* ad = acc.data();
  const double* gd = g.data();
  for (std::int64_t i = 0; i < acc.size(); ++i) ad[i] += w * gd[i];
}

// Teacher list for student i (1-based) under a strategy: IPKD -> {n},
// TA-1 -> {i+1}, TA-M -> {i+1..n}, each TA-M teacher weighted 1/(n-i).
std::vector<std::int64_t> teachers_of(Strategy strategy, std::int64_t i, std::int64_t n) {
  switch (strategy) {
    case Strategy::kNone: return {};
    case Strategy::kIpkd: return {n};
    case Strategy::kTa1: return {i + 1};
    case Strategy::kTaM: {
      std::vector<std::int64_t> t;
      for (std::int64_t j = i + 1; j <= n; ++j) t.push_back(j);
      return t;
    }
  }
  return {};
}

}  // namespace

FlexibleLossResult flexible_loss(const LogitsBundle& bundle, const DistillConfig& cfg) {
  cfg.validate();
  bundle.validate();
  const std::int64_t n = bundle.n();
  if (cfg.strategy != Strategy::kNone && n < 2) {
    throw ConfigError("strategy " + to_string(cfg.strategy) +
                      " needs at least 2 sub-models, got " + std::to_string(n));
  }

  FlexibleLossResult result;
  result.logit_grads.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    result.logit_grads.emplace_back(bundle.logits[static_cast<std::size_t>(i)].shape());
  }

  // Supervised terms. The largest sub-model always trains at full weight;
  // under a distillation strategy the smaller ones train at (1 - lambda).
  for (std::int64_t i = 1; i <= n; ++i) {
    Tensor g;
    const double value = cross_entropy(bundle.logits[static_cast<std::size_t>(i - 1)],
                                       bundle.labels, &g);
    const double weight =
        (cfg.strategy == Strategy::kNone || i == n) ? 1.0 : (1.0 - cfg.lambda);
    result.terms.push_back({"ce_exit" + std::to_string(i), value, weight});
    add_scaled_into(result.logit_grads[static_cast<std::size_t>(i - 1)], g, weight);
    result.total += weight * value;
  }

  // Distillation terms.
  for (std::int64_t i = 1; i < n; ++i) {
    const std::vector<std::int64_t> teachers = teachers_of(cfg.strategy, i, n);
    if (teachers.empty()) continue;
    const double teacher_weight = 1.0 / static_cast<double>(teachers.size());
    if (n <= 16) {
      // Sum of equal weights computed as one product so it is correctly
      // rounded; must come out at exactly 1.
      const double weight_sum = static_cast<double>(teachers.size()) * teacher_weight;
      if (weight_sum != 1.0) {
        throw NumericError("teacher weights for sub-model " + std::to_string(i) +
                           " do not sum to 1");
      }
    }
    for (const std::int64_t j : teachers) {
      Tensor gs;
      Tensor gt;
      const double value =
          kd_loss(bundle.logits[static_cast<std::size_t>(i - 1)],
                  bundle.logits[static_cast<std::size_t>(j - 1)], cfg.tau, cfg.divergence,
                  cfg.kl_order, &gs, cfg.detach_teacher ? nullptr : &gt);
      const double weight = cfg.lambda * teacher_weight;
      result.terms.push_back(
          {"kd_" + std::to_string(i) + "from" + std::to_string(j), value, weight});
      add_scaled_into(result.logit_grads[static_cast<std::size_t>(i - 1)], gs, weight);
      if (!cfg.detach_teacher) {
        add_scaled_into(result.logit_grads[static_cast<std::size_t>(j - 1)], gt, weight);
      }
      result.total += weight * value;
    }
  }
  return result;
}

std::vector<std::string> loss_term_names(Strategy strategy, std::int64_t n) {
  std::vector<std::string> names;
  for (std::int64_t i = 1; i <= n; ++i) names.push_back("ce_exit" + std::to_string(i));
  for (std::int64_t i = 1; i < n; ++i) {
    for (const std::int64_t j : teachers_of(strategy, i, n)) {
      names.push_back("kd_" + std::to_string(i) + "from" + std::to_string(j));
    }
  }
  return names;
}

}  // namespace flexkd
