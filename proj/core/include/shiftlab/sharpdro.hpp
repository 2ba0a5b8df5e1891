#pragma once

// Worst-case sharpness minimization over corruption severities.
//
// Each step first fixes the worst-case weighting (group weights updated by
// exponentiated-gradient ascent when severities are annotated, or per-example
// OOD scores from the weight perturbation when they are not) and then
// descends on weighted loss plus weighted sharpness. The sharpness term uses
// the sign perturbation eps* = rho * sign(grad), so
//     L_w(theta) + R_w(theta) = L_w(theta + eps*)
// and a step costs exactly two forward and two backward passes.

#include "shiftlab/corruption_data.hpp"
#include "shiftlab/optim.hpp"
#include "shiftlab/run_record.hpp"
#include "shiftlab/toy_models.hpp"

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace shiftlab::sharpdro {

using models::Batch;
using models::DualHeadModel;
using Vector = Eigen::VectorXd;

struct PerturbationConfig {
  double rho = 0.05;
};

enum class WeightMode { aware, agnostic };

std::string to_string(WeightMode mode);

/// Aware mode: one weight per severity group, kept on the probability simplex.
/// Agnostic mode: one weight per batch example, mean 1 after normalization.
struct WorstCaseWeights {
  WeightMode mode = WeightMode::aware;
  Vector values;
  double eta = 1e-2;
  /// Frozen weights are never updated by a step.
  bool frozen = false;

  static WorstCaseWeights uniform_groups(int groups, double eta = 1e-2);
  /// All-ones per-example weights. Frozen, this is plain ERM weighting.
  static WorstCaseWeights uniform_examples(std::size_t n, bool frozen);

  /// Per-example coefficients w_i such that the objective is sum_i w_i l_i.
  /// Aware: w_i = omega_{s_i} / n_{s_i}. Agnostic: w_i = omega_i / n.
  Vector example_weights(const Batch& batch) const;
};

/// rho * sign(grad) with sign(0) = 0. Throws NumericError on NaN.
Vector sam_perturbation(const Vector& grad, double rho);

/// Loss over the classifier parameters (extractor + class head). When `grad`
/// is non-null it receives the gradient.
using LossFn = std::function<double(const DualHeadModel&, const Batch&, Vector* grad)>;

/// Mean cross-entropy of the class path.
LossFn mean_cross_entropy();

/// L(theta + eps*) - L(theta) with eps* = sam_perturbation(grad L(theta)).
/// Parameters are bit-identical to entry on return.
double sharpness(const LossFn& loss_fn, DualHeadModel& model, const Batch& batch, double rho);

/// omega_i = max softmax(theta; x_i) - max softmax(theta + eps*; x_i), with
/// eps* from the mean cross-entropy gradient. Parameters restored exactly.
Vector ood_score(DualHeadModel& model, const Batch& batch, double rho);

/// omega_i / mean(omega). Returns all ones (and logs) when the mean is not
/// positive.
Vector normalize_scores(const Vector& scores);

/// w_s <- w_s * exp(eta * l_s), renormalized to the simplex.
WorstCaseWeights update_group_weights(const WorstCaseWeights& w, const Vector& per_group_losses,
                                      double eta);

/// Mean per-example loss within each group; groups absent from the batch get 0.
Vector group_mean_losses(const Vector& per_example, const std::vector<int>& group, int groups);

struct StepMetrics {
  double weighted_loss = 0.0;       // L_w(theta)
  double perturbed_loss = 0.0;      // L_w(theta + eps*)
  double sharpness = 0.0;           // difference of the two
  double grad_norm = 0.0;           // norm of the descent gradient
  double mean_loss = 0.0;           // unweighted mean cross-entropy at theta
  Vector group_losses;              // aware mode only
  int forward_passes = 0;
  int backward_passes = 0;
};

struct StepConfig {
  double rho = 0.05;
  /// Agnostic mode: exponential smoothing of per-example scores across steps,
  /// keyed by Batch::index. 0 disables it.
  double score_smoothing = 0.0;
  /// Clamp negative OOD scores to zero before normalization, which keeps
  /// agnostic weights nonnegative.
  bool clamp_negative_scores = true;
};

/// Per-dataset-row state for optional agnostic score smoothing.
struct ScoreMemory {
  Vector scores;  // indexed by dataset row
  std::vector<unsigned char> seen;
};

/// One SharpDRO iteration. Updates `w` (unless frozen), then applies one
/// optimizer step to the classifier parameters.
StepMetrics sharpdro_step(DualHeadModel& model, const Batch& batch, WorstCaseWeights& w,
                          const StepConfig& cfg, optim::Sgd& opt, ScoreMemory* memory = nullptr);

/// Plain GroupDRO: exponentiated-gradient weight update then descent on the
/// group-weighted loss at theta. One forward and one backward pass.
StepMetrics groupdro_step(DualHeadModel& model, const Batch& batch, WorstCaseWeights& w,
                          optim::Sgd& opt);

/// Empirical risk minimization step on the mean cross-entropy.
StepMetrics erm_step(DualHeadModel& model, const Batch& batch, optim::Sgd& opt);

// Training --------------------------------------------------------------

enum class Algorithm { erm, groupdro, irm, rex, sharpdro_aware, sharpdro_agnostic };

std::string to_string(Algorithm a);
std::optional<Algorithm> algorithm_from_string(const std::string& name);

struct TrainConfig {
  Algorithm algorithm = Algorithm::sharpdro_aware;
  models::ModelSpec model;
  double lr = 0.1;
  double momentum = 0.0;
  double weight_decay = 0.0;
  long iterations = 1000;
  std::size_t batch_size = 0;  // 0 = full batch
  double rho = 0.05;
  double eta = 1e-2;
  double penalty_weight = 0.0;  // lambda for irm / rex
  double score_smoothing = 0.0;
  long eval_every = 100;
  std::uint64_t seed = 0;
};

struct Evaluation {
  std::vector<double> accuracy_by_severity;
  std::vector<double> loss_by_severity;
  double worst_accuracy = 0.0;
  int worst_severity = 0;
};

/// Per-severity accuracy / loss of the class path on `test`.
Evaluation evaluate_by_severity(const DualHeadModel& model, const data::CorruptedDataset& test,
                                int max_severity);

struct TrainResult {
  DualHeadModel model;
  RunRecord record;
  Evaluation final_eval;
  WorstCaseWeights weights;
};

/// Runs the configured algorithm on `train`, evaluating on `test` (which
/// carries severity indices). Seeds are derived from config.seed through the
/// "init" and "train" substreams.
TrainResult train(const TrainConfig& config, const data::CorruptedDataset& train,
                  const data::CorruptedDataset& test);

/// Pixels in [0,1] centered at mid-gray, the representation models consume.
Eigen::MatrixXd model_input(const Eigen::MatrixXd& pixels);
/// Converts a corrupted dataset into a model batch (group = severity).
Batch to_batch(const data::CorruptedDataset& ds);

}  // namespace shiftlab::sharpdro
