#pragma once

// Dynamic sparse invariant learning. A binary mask m over the extractor
// splits its weights into invariant θ_inv = m∘θ, trained on the task
// objective through the class head, and variant θ_var = (1−m)∘θ, trained to
// predict the environment through the domain head. Every ΔT iterations the
// k least task-relevant invariant weights are dropped and the k least
// domain-relevant variant weights are recalled, with k following a cosine
// schedule.

#include "shiftlab/autodiff.hpp"
#include "shiftlab/corruption_data.hpp"
#include "shiftlab/run_record.hpp"
#include "shiftlab/toy_models.hpp"

#include <Eigen/Dense>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace shiftlab::evil {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using models::GradientSnapshot;

struct ParameterMask {
  std::vector<unsigned char> bits;

  std::size_t size() const { return bits.size(); }
  std::size_t kept() const;
  /// R = 1 - kept / size.
  double sparsity() const;
  Vector as_vector() const;
  /// 1 - m.
  Vector complement() const;

  bool operator==(const ParameterMask&) const = default;
};

/// Keeps the round((1-R)|θ|) largest-magnitude coordinates, lower index first
/// on ties.
ParameterMask init_mask_by_magnitude(const Vector& theta, double sparsity);

struct AnnealSchedule {
  double alpha = 0.2;
  long T = 1;
  long delta_T = 300;
  long t_pre = 1000;

  /// (alpha/2)(1 + cos(t pi / T)).
  double S(long t) const;
};

/// round-half-even(‖m‖₀ · S(t)), clamped so neither partition can empty.
long swap_count(long t, const AnnealSchedule& sched, const ParameterMask& m);

/// Drops the k kept coordinates with the smallest |task grad| and recalls the
/// k pruned coordinates with the smallest |domain grad|. Ties go to the lower
/// index. k is clamped to the partition sizes.
ParameterMask update_mask(const ParameterMask& m, const GradientSnapshot& grad_task,
                          const GradientSnapshot& grad_domain, long k);

// Regularizers ------------------------------------------------------------

/// Per example i the derivative of CE(s·z_i, y_i) at s = 1 is
/// d_i = sum_c p_ic z_ic - z_{i,y_i}. Returns sum_i d_i^2 over every
/// environment, unnormalized. Empty environments are skipped.
double irm_penalty_sum(std::span<const Matrix> per_env_logits,
                       std::span<const std::vector<int>> labels);

/// irm_penalty_sum divided by the total example count.
double irm_penalty(std::span<const Matrix> per_env_logits,
                   std::span<const std::vector<int>> labels);

/// Tape version over one stacked logits matrix: mean_i d_i^2.
ad::Var irm_penalty(ad::Var logits, std::span<const int> labels);

/// Population variance of the per-environment losses; needs at least two.
double rex_penalty(const Vector& env_losses);
ad::Var rex_penalty(const std::vector<ad::Var>& env_losses);

/// sum_e w_e l_e for simplex weights w.
double groupdro_objective(const Vector& env_losses, const Vector& w);

/// Sign perturbation of grad restricted to the kept coordinates; exactly zero
/// elsewhere.
Vector evil_sam_perturbation(const Vector& grad, const ParameterMask& m, double rho);

// Training ----------------------------------------------------------------

enum class Regularizer { erm, irm, rex, dro };

std::string to_string(Regularizer r);
std::optional<Regularizer> regularizer_from_string(const std::string& name);

/// Objective of the variant path, which both trains θ_var and ranks the pruned
/// coordinates for recall. `task_gradient` is the RigL-style ablation: the
/// task loss through the class head applied to the variant features.
enum class RecallCriterion { domain_gradient, task_gradient };

struct EvilConfig {
  Regularizer reg = Regularizer::erm;
  double penalty_weight = 0.0;
  double eta = 1e-2;
  double sparsity = 0.8;
  double alpha = 0.2;
  long delta_T = 300;
  long t_pre = 1000;
  long iterations = 3000;
  RecallCriterion recall = RecallCriterion::domain_gradient;
  bool sam = false;
  double rho = 0.05;
  models::ModelSpec model{models::ExtractorKind::linear, 40, 8, 2, 3};
  double lr = 0.1;
  double domain_lr = 0.1;
  double momentum = 0.0;
  long log_every = 1;
  std::uint64_t seed = 0;
};

struct PartitionVariance {
  double invariant = 0.0;
  double variant = 0.0;
};

struct EvilResult {
  models::DualHeadModel model;
  ParameterMask mask;
  RunRecord record;
  /// Fraction of ground-truth invariant coordinates in the final kept set.
  double invariant_coverage = 0.0;
  PartitionVariance variance;
};

/// Batch over synthetic environments (class indices, group = environment).
models::Batch to_batch(const data::SyntheticEnvs& envs);

/// Extractor coordinates reading one of the first m_inv input features.
std::vector<unsigned char> invariant_coordinates(const models::DualHeadModel& model, int m_inv);

double invariant_coverage(const ParameterMask& m, const models::DualHeadModel& model, int m_inv);

/// Per-environment task-loss gradients with respect to the effective (masked)
/// extractor weights, reduced by diagnostics::gradient_variance over the kept
/// and the pruned coordinates separately.
PartitionVariance partition_gradient_variance(const models::DualHeadModel& model,
                                              const ParameterMask& m,
                                              const data::SyntheticEnvs& envs);

EvilResult evil_train(const EvilConfig& config, const data::SyntheticEnvs& envs);

}  // namespace shiftlab::evil
