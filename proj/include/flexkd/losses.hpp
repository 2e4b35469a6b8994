#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flexkd/tensor.hpp"

namespace flexkd {

enum class Divergence { kKl, kCe };

/// How a flexible model's sub-models teach each other during joint training:
/// none (plain supervised sum), distill every smaller sub-model from the
/// largest one (IPKD), from the next-larger one (TA-1), or from all larger
/// ones with equal weights (TA-M).
enum class Strategy { kNone, kIpkd, kTa1, kTaM };

/// Direction of the KL divergence in the distillation term.
enum class KlOrder { kStudentFirst, kTeacherFirst };

std::string to_string(Strategy s);
std::string to_string(Divergence d);
std::string to_string(KlOrder o);
Strategy strategy_from_string(const std::string& s);
Divergence divergence_from_string(const std::string& s);
KlOrder kl_order_from_string(const std::string& s);

struct DistillConfig {
  double tau = 1.0;      // softening temperature, > 0
  double lambda = 0.8;   // distillation weight, in [0, 1]
  Divergence divergence = Divergence::kKl;
  Strategy strategy = Strategy::kNone;
  /// Teacher logits are treated as constants (no gradient flows into them).
  bool detach_teacher = true;
  KlOrder kl_order = KlOrder::kStudentFirst;

  void validate() const;
};

/// Per-sub-model logits a[1..n], ordered so the largest sub-model is last,
/// plus one-hot labels. All tensors share [batch x classes].
struct LogitsBundle {
  std::vector<Tensor> logits;
  Tensor labels;  // one-hot rows

  std::int64_t n() const { return static_cast<std::int64_t>(logits.size()); }
  void validate() const;
};

/// Throws ValueError unless every row has exactly one 1 and zeros elsewhere.
void validate_one_hot(const Tensor& labels);

/// One summand of a flexible loss: `value` is the raw (unweighted) term,
/// `weight` its multiplier in the total.
struct LossTerm {
  std::string name;  // ce_exit{i} or kd_{i}from{j}
  double value = 0.0;
  double weight = 0.0;
};

struct FlexibleLossResult {
  double total = 0.0;
  std::vector<LossTerm> terms;
  std::vector<Tensor> logit_grads;  // d total / d a[i], aligned with bundle.logits
};

/// Mean over the batch of -log softmax(logits)[label]; `grad` (optional)
/// receives d loss / d logits.
double cross_entropy(const Tensor& logits, const Tensor& onehot_labels, Tensor* grad = nullptr);

/// Temperature-scaled distillation term between one student/teacher pair,
/// batch-averaged, with a tau^2 prefactor.
///   KL mode:  tau^2 * D_KL(softmax(s/tau) || softmax(t/tau))   (student-first
///             order; kTeacherFirst swaps the arguments)
///   CE mode:  tau^2 * H(softmax(t/tau), softmax(s/tau))  — the teacher
///             distribution weights the student's log-probabilities.
/// Optional grads receive d loss / d student and d loss / d teacher.
double kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, double tau,
               Divergence divergence, KlOrder kl_order = KlOrder::kStudentFirst,
               Tensor* grad_student = nullptr, Tensor* grad_teacher = nullptr);

/// (1 - lambda) * cross_entropy + lambda * kd_loss for a single student.
double student_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                    const Tensor& onehot_labels, const DistillConfig& cfg,
                    Tensor* grad_student = nullptr);

/// Joint loss over all sub-models for the configured strategy, with the
/// per-term breakdown and the gradient w.r.t. every logits tensor.
FlexibleLossResult flexible_loss(const LogitsBundle& bundle, const DistillConfig& cfg);

/// Term names for a given strategy and sub-model count, in the order
/// flexible_loss reports them (used as metric column headers).
std::vector<std::string> loss_term_names(Strategy strategy, std::int64_t n);

}  // namespace flexkd
