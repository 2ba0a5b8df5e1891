#pragma once

// Multi-severity corrupted datasets with Poisson-distributed severities, and
// synthetic environments with controlled invariant / spurious structure.

#include "shiftlab/rng.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace shiftlab::data {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr int kMaxSeverity = 5;

enum class CorruptionKind { none, gaussian, shot };

std::string_view to_string(CorruptionKind kind);
CorruptionKind corruption_kind_from_string(std::string_view name);

/// Poisson law over severities 0..max_severity. `raw` is the untruncated pmf,
/// `weights` the same values renormalized to unit sum.
struct SeverityDistribution {
  double lambda = 1.0;
  int max_severity = kMaxSeverity;
  std::vector<double> raw;
  std::vector<double> weights;

  int buckets() const { return max_severity + 1; }
};

/// e^{-lambda} lambda^s / s!. Throws DomainError for lambda <= 0 or s < 0.
double poisson_pmf(int s, double lambda);

SeverityDistribution make_severity_distribution(double lambda, int max_severity);

/// i.i.d. draws from dist.weights; a pure function of (n, dist, seed).
std::vector<int> assign_severities(std::size_t n, const SeverityDistribution& dist,
                                   std::uint64_t seed);

/// Per-severity corruption constants for severities 1..5.
struct CorruptionTable {
  std::array<double, kMaxSeverity> gaussian_sigma{0.04, 0.06, 0.08, 0.09, 0.10};
  std::array<double, kMaxSeverity> shot_photons{60.0, 25.0, 12.0, 5.0, 3.0};
};

const CorruptionTable& default_corruption_table();

/// Adds N(0, sigma_s^2) noise and clips to [0,1]. Severity 0 is the identity
/// and consumes nothing from `rng`.
Vector apply_gaussian_noise(const Vector& x, int severity, Rng& rng,
                            const CorruptionTable& table = default_corruption_table());

/// Poisson(x * c_s) / c_s per element, clipped to [0,1]. Severity 0 is the
/// identity and consumes nothing from `rng`.
Vector apply_shot_noise(const Vector& x, int severity, Rng& rng,
                        const CorruptionTable& table = default_corruption_table());

Vector apply_corruption(CorruptionKind kind, const Vector& x, int severity, Rng& rng,
                        const CorruptionTable& table = default_corruption_table());

/// Labeled clean inputs, one example per row.
struct LabeledSource {
  Matrix x;
  std::vector<int> y;
  int classes = 2;

  std::size_t size() const { return y.size(); }
};

struct CorruptedExample {
  Vector x;
  int y = 0;
  int severity = 0;
  CorruptionKind kind = CorruptionKind::none;
};

/// Columnar corrupted dataset; row i of x pairs with y[i] and severity[i].
struct CorruptedDataset {
  Matrix x;
  std::vector<int> y;
  std::vector<int> severity;
  CorruptionKind kind = CorruptionKind::gaussian;
  SeverityDistribution dist;
  std::uint64_t seed = 0;
  int classes = 2;

  std::size_t size() const { return y.size(); }
  CorruptedExample example(std::size_t i) const;
  std::vector<std::size_t> severity_counts() const;
  /// Row indices with the given severity, in dataset order.
  std::vector<std::size_t> indices_with_severity(int s) const;
  CorruptedDataset subset(std::span<const std::size_t> rows) const;
};

struct BuildOptions {
  int max_severity = kMaxSeverity;
  CorruptionTable table = default_corruption_table();
  /// Worker threads. Output does not depend on this value.
  unsigned workers = 1;
};

/// One corrupted example per source row. Severities come from
/// assign_severities; per-example noise is drawn from a stream derived from
/// (seed, row), so results are independent of the worker count.
CorruptedDataset build_corrupted_dataset(const LabeledSource& source, CorruptionKind kind,
                                         double lambda, std::uint64_t seed,
                                         const BuildOptions& options = {});

/// Corrupts every row at one fixed severity (used for per-severity test sets).
CorruptedDataset corrupt_at_severity(const LabeledSource& source, CorruptionKind kind,
                                     int severity, std::uint64_t seed,
                                     const CorruptionTable& table = default_corruption_table());

/// Two-class toy "images" in [0,1]^dim. A small block of shortcut pixels
/// separates the classes with no clean variation but a margin that noise
/// destroys; the remaining pixels carry a weaker, noise-robust class signal
/// under independent clean variation.
struct ToyImageSpec {
  int dim = 64;
  int shortcut_pixels = 4;
  double shortcut_amplitude = 0.03;
  double signal_amplitude = 0.02;
  double clean_stddev = 0.05;
};

LabeledSource make_toy_images(std::size_t n, const ToyImageSpec& spec, Rng& rng);

/// ±1 environments: invariant block equals the label; each spurious element
/// agrees with the label with probability p[e].
struct SyntheticEnvSpec {
  int m_inv = 8;
  int m_var = 32;
  std::vector<double> p{0.6, 0.7, 0.8};
  std::size_t n = 1000;  // per environment
  /// Environment-dependent sign skew of the spurious block in [0,1]. At 0 the
  /// spurious elements are label-symmetric; above 0 each environment shifts
  /// P(z = +1) per coordinate while keeping P(z = y) = p[e] for balanced
  /// labels. Models spurious features caused by the domain.
  double domain_skew = 0.0;

  int envs() const { return static_cast<int>(p.size()); }
  int dim() const { return m_inv + m_var; }
};

struct SyntheticEnvs {
  Matrix x;               // n_total x (m_inv + m_var), entries in {-1,+1}
  std::vector<int> y;     // labels in {-1,+1}
  std::vector<int> env;   // environment index d
  int m_inv = 0;
  int m_var = 0;
  int envs = 0;

  std::size_t size() const { return y.size(); }
  /// Labels mapped to class indices {0,1}.
  std::vector<int> class_index() const;
  std::vector<std::size_t> indices_of_env(int e) const;
};

SyntheticEnvs make_synthetic_envs(const SyntheticEnvSpec& spec, std::uint64_t seed);

}  // namespace shiftlab::data
