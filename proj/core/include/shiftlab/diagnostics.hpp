#pragma once

// Read-only instruments: per-severity sharpness and gradient norms,
// cross-environment gradient variance, and top Hessian eigenvalues by Lanczos
// with a dense eigendecomposition as oracle. Every function that takes a
// model returns it with bit-identical parameters.

#include "shiftlab/corruption_data.hpp"
#include "shiftlab/sharpdro.hpp"
#include "shiftlab/toy_models.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace shiftlab::diagnostics {

using Vector = Eigen::VectorXd;
using models::Batch;
using models::DualHeadModel;

/// Mean over coordinates of the population variance across environments.
double gradient_variance(const std::vector<Vector>& per_env_grads);

enum class SpectrumMethod { lanczos, dense };

std::string to_string(SpectrumMethod m);

struct SpectrumReport {
  std::vector<double> eigenvalues;  // descending
  std::optional<double> ratio_1_5;  // lambda_1 / lambda_5
  SpectrumMethod method = SpectrumMethod::lanczos;
  int iterations = 0;
  /// Lanczos hit an invariant subspace. When the space was not exhausted the
  /// iteration restarted from a fresh orthogonal direction.
  bool breakdown = false;
};

/// Loss and gradient as a function of a flat parameter vector.
using GradFn = std::function<double(const Vector& params, Vector* grad)>;
using Hvp = std::function<Vector(const Vector&)>;

inline constexpr double kHvpStep = 1e-4;

/// (grad(x + h v) - grad(x - h v)) / 2h.
Vector finite_difference_hvp(const GradFn& f, const Vector& x, const Vector& v,
                             double h = kHvpStep);

/// Lanczos with full reorthogonalization on an n-dimensional operator.
/// iters = 0 means 3k.
SpectrumReport lanczos_top_k(const Hvp& hvp, Eigen::Index n, int k, int iters = 0,
                             std::uint64_t seed = 0);

/// Eigenvalues of the operator assembled column by column, symmetrized.
/// Refuses n > 2000.
SpectrumReport dense_top_k(const Hvp& hvp, Eigen::Index n, int k);

inline constexpr Eigen::Index kDenseLimit = 2000;

/// Hessian of loss_fn over the classifier parameters at the current weights.
SpectrumReport hessian_lanczos(DualHeadModel& model, const sharpdro::LossFn& loss_fn,
                               const Batch& batch, int k = 5, int iters = 0,
                               std::uint64_t seed = 0);
SpectrumReport hessian_dense(DualHeadModel& model, const sharpdro::LossFn& loss_fn,
                             const Batch& batch, int k = 5);

struct SeverityTable {
  std::vector<int> severity;  // one row per present severity, ascending
  std::vector<double> value;
  std::vector<std::size_t> count;
  std::vector<std::string> notes;
};

SeverityTable sharpness_by_severity(DualHeadModel& model, const data::CorruptedDataset& dataset,
                                    double rho);
SeverityTable grad_norm_by_severity(DualHeadModel& model, const data::CorruptedDataset& dataset);

std::string to_csv(const SeverityTable& table, const std::string& value_name);
std::string to_csv(const SpectrumReport& report);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace shiftlab::diagnostics
