#include "shiftlab/corruption_data.hpp"

#include "shiftlab/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

namespace shiftlab::data {

std::string_view to_string(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::none: return "none";
    case CorruptionKind::gaussian: return "gaussian";
    case CorruptionKind::shot: return "shot";
  }
  return "none";
}

CorruptionKind corruption_kind_from_string(std::string_view name) {
  if (name == "gaussian") return CorruptionKind::gaussian;
  if (name == "shot") return CorruptionKind::shot;
  if (name == "none") return CorruptionKind::none;
  throw DomainError("unknown corruption kind '" + std::string(name) + "'");
}

double poisson_pmf(int s, double lambda) {
  if (!(lambda > 0.0) || !std::isfinite(lambda)) {
    throw DomainError("poisson_pmf: lambda must be positive and finite");
  }
  if (s < 0) throw DomainError("poisson_pmf: s must be nonnegative");
  const double sd = static_cast<double>(s);
  return std::exp(sd * std::log(lambda) - lambda - std::lgamma(sd + 1.0));
}

SeverityDistribution make_severity_distribution(double lambda, int max_severity) {
  if (max_severity < 0) throw DomainError("make_severity_distribution: S must be >= 0");
  SeverityDistribution d;
  d.lambda = lambda;
  d.max_severity = max_severity;
  d.raw.reserve(static_cast<std::size_t>(max_severity) + 1);
  for (int s = 0; s <= max_severity; ++s) d.raw.push_back(poisson_pmf(s, lambda));
  const double z = std::accumulate(d.raw.begin(), d.raw.end(), 0.0);
  d.weights.reserve(d.raw.size());
  for (double r : d.raw) d.weights.push_back(r / z);
  return d;
}

std::vector<int> assign_severities(std::size_t n, const SeverityDistribution& dist,
                                   std::uint64_t seed) {
  if (dist.weights.empty()) throw DomainError("assign_severities: empty distribution");
  Rng rng(seed);
  std::discrete_distribution<int> draw(dist.weights.begin(), dist.weights.end());
  std::vector<int> out(n);
  for (auto& s : out) s = draw(rng);
  return out;
}

const CorruptionTable& default_corruption_table() {
  static const CorruptionTable table{};
  return table;
}

namespace {

void check_severity(int severity, const char* op) {
  if (severity < 0 || severity > kMaxSeverity) {
    throw DomainError(std::string(op) + ": severity must be in 0..5");
  }
}

}  // namespace

Vector apply_gaussian_noise(const Vector& x, int severity, Rng& rng,
                            const CorruptionTable& table) {
  check_severity(severity, "apply_gaussian_noise");
  if (severity == 0) return x;
  std::normal_distribution<double> noise(0.0, table.gaussian_sigma[severity - 1]);
  Vector out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    out(i) = std::clamp(x(i) + noise(rng), 0.0, 1.0);
  }
  return out;
}

Vector apply_shot_noise(const Vector& x, int severity, Rng& rng, const CorruptionTable& table) {
  check_severity(severity, "apply_shot_noise");
  if (severity == 0) return x;
  const double c = table.shot_photons[severity - 1];
  Vector out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double mean = std::max(x(i), 0.0) * c;
    double photons = 0.0;
    if (mean > 0.0) {
      std::poisson_distribution<long> draw(mean);
      photons = static_cast<double>(draw(rng));
    }
    out(i) = std::clamp(photons / c, 0.0, 1.0);
  }
  return out;
}

Vector apply_corruption(CorruptionKind kind, const Vector& x, int severity, Rng& rng,
                        const CorruptionTable& table) {
  switch (kind) {
    case CorruptionKind::gaussian: return apply_gaussian_noise(x, severity, rng, table);
    case CorruptionKind::shot: return apply_shot_noise(x, severity, rng, table);
    case CorruptionKind::none: check_severity(severity, "apply_corruption"); return x;
  }
  return x;
}

CorruptedExample CorruptedDataset::example(std::size_t i) const {
  return CorruptedExample{x.row(static_cast<Eigen::Index>(i)).transpose(), y.at(i),
                          severity.at(i), kind};
}

std::vector<std::size_t> CorruptedDataset::severity_counts() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(dist.buckets()), 0);
  for (int s : severity) ++counts.at(static_cast<std::size_t>(s));
  return counts;
}

std::vector<std::size_t> CorruptedDataset::indices_with_severity(int s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < severity.size(); ++i) {
    if (severity[i] == s) out.push_back(i);
  }
  return out;
}

CorruptedDataset CorruptedDataset::subset(std::span<const std::size_t> rows) const {
  CorruptedDataset out;
  out.kind = kind;
  out.dist = dist;
  out.seed = seed;
  out.classes = classes;
  out.x.resize(static_cast<Eigen::Index>(rows.size()), x.cols());
  out.y.reserve(rows.size());
  out.severity.reserve(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    out.x.row(static_cast<Eigen::Index>(k)) = x.row(static_cast<Eigen::Index>(rows[k]));
    out.y.push_back(y.at(rows[k]));
    out.severity.push_back(severity.at(rows[k]));
  }
  return out;
}

namespace {

void corrupt_rows(const LabeledSource& source, CorruptionKind kind,
                  std::span<const int> severities, const SeedSequence& seeds,
                  const CorruptionTable& table, Matrix& out, std::size_t begin,
                  std::size_t end) {
  for (std::size_t i = begin; i < end; ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    Rng rng = seeds.stream("noise", i);
    Vector clean = source.x.row(row).transpose();
    out.row(row) = apply_corruption(kind, clean, severities[i], rng, table).transpose();
  }
}

}  // namespace

CorruptedDataset build_corrupted_dataset(const LabeledSource& source, CorruptionKind kind,
                                         double lambda, std::uint64_t seed,
                                         const BuildOptions& options) {
  if (source.size() == 0) throw DomainError("build_corrupted_dataset: empty source");
  if (static_cast<std::size_t>(source.x.rows()) != source.size()) {
    throw DomainError("build_corrupted_dataset: x rows and labels disagree");
  }
  if (kind == CorruptionKind::none) {
    throw DomainError("build_corrupted_dataset: kind must be gaussian or shot");
  }
  if (options.max_severity > kMaxSeverity) {
    throw DomainError("build_corrupted_dataset: max severity above 5");
  }
  const SeedSequence seeds(seed);

  CorruptedDataset out;
  out.kind = kind;
  out.seed = seed;
  out.classes = source.classes;
  out.dist = make_severity_distribution(lambda, options.max_severity);
  out.y = source.y;
  out.severity = assign_severities(source.size(), out.dist, seeds.seed("severity"));
  out.x.resize(source.x.rows(), source.x.cols());

  const std::size_t n = source.size();
  const unsigned workers = std::clamp<unsigned>(options.workers, 1u, 64u);
  if (workers == 1 || n < 2 * workers) {
    corrupt_rows(source, kind, out.severity, seeds, options.table, out.x, 0, n);
  } else {
    std::vector<std::jthread> pool;
    const std::size_t shard = (n + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
      const std::size_t b = std::min(n, w * shard);
      const std::size_t e = std::min(n, b + shard);
      pool.emplace_back([&, b, e] {
        corrupt_rows(source, kind, out.severity, seeds, options.table, out.x, b, e);
      });
    }
  }
  return out;
}

CorruptedDataset corrupt_at_severity(const LabeledSource& source, CorruptionKind kind,
                                     int severity, std::uint64_t seed,
                                     const CorruptionTable& table) {
  if (source.size() == 0) throw DomainError("corrupt_at_severity: empty source");
  check_severity(severity, "corrupt_at_severity");
  const SeedSequence seeds(seed);
  CorruptedDataset out;
  out.kind = kind;
  out.seed = seed;
  out.classes = source.classes;
  out.dist = make_severity_distribution(1.0, kMaxSeverity);
  out.y = source.y;
  out.severity.assign(source.size(), severity);
  out.x.resize(source.x.rows(), source.x.cols());
  corrupt_rows(source, kind, out.severity, seeds, table, out.x, 0, source.size());
  return out;
}

LabeledSource make_toy_images(std::size_t n, const ToyImageSpec& spec, Rng& rng) {
  if (spec.dim <= spec.shortcut_pixels || spec.shortcut_pixels < 0) {
    throw DomainError("make_toy_images: need dim > shortcut_pixels >= 0");
  }
  LabeledSource src;
  src.classes = 2;
  src.x.resize(static_cast<Eigen::Index>(n), spec.dim);
  src.y.resize(n);
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> jitter(0.0, spec.clean_stddev);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = coin(rng) ? 1 : 0;
    const double sign = y == 1 ? 1.0 : -1.0;
    src.y[i] = y;
    for (int j = 0; j < spec.dim; ++j) {
      double v = 0.5;
      if (j < spec.shortcut_pixels) {
        v += sign * spec.shortcut_amplitude;
      } else {
        v += sign * spec.signal_amplitude + jitter(rng);
      }
      src.x(static_cast<Eigen::Index>(i), j) = std::clamp(v, 0.0, 1.0);
    }
  }
  return src;
}

std::vector<int> SyntheticEnvs::class_index() const {
  std::vector<int> out(y.size());
  std::transform(y.begin(), y.end(), out.begin(), [](int v) { return v > 0 ? 1 : 0; });
  return out;
}

std::vector<std::size_t> SyntheticEnvs::indices_of_env(int e) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < env.size(); ++i) {
    if (env[i] == e) out.push_back(i);
  }
  return out;
}

SyntheticEnvs make_synthetic_envs(const SyntheticEnvSpec& spec, std::uint64_t seed) {
  if (spec.m_inv < 1 || spec.m_var < 1) throw DomainError("make_synthetic_envs: empty block");
  if (spec.p.empty()) throw DomainError("make_synthetic_envs: no environments");
  for (double p : spec.p) {
    if (!(p >= 0.0 && p <= 1.0)) throw DomainError("make_synthetic_envs: p_e outside [0,1]");
  }
  if (!(spec.domain_skew >= 0.0 && spec.domain_skew <= 1.0)) {
    throw DomainError("make_synthetic_envs: domain_skew outside [0,1]");
  }
  const SeedSequence seeds(seed);
  Rng code_rng = seeds.stream("domain-code");
  std::bernoulli_distribution coin(0.5);

  SyntheticEnvs out;
  out.m_inv = spec.m_inv;
  out.m_var = spec.m_var;
  out.envs = spec.envs();
  const std::size_t total = spec.n * spec.p.size();
  out.x.resize(static_cast<Eigen::Index>(total), spec.dim());
  out.y.reserve(total);
  out.env.reserve(total);

  std::size_t row = 0;
  for (int e = 0; e < spec.envs(); ++e) {
    const double p = spec.p[static_cast<std::size_t>(e)];
    const double room = std::min(p, 1.0 - p);
    std::vector<double> skew(static_cast<std::size_t>(spec.m_var));
    for (auto& s : skew) s = spec.domain_skew * room * (coin(code_rng) ? 1.0 : -1.0);

    Rng rng = seeds.stream("env", static_cast<std::uint64_t>(e));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t i = 0; i < spec.n; ++i, ++row) {
      const int y = coin(rng) ? 1 : -1;
      const auto r = static_cast<Eigen::Index>(row);
      for (int j = 0; j < spec.m_inv; ++j) out.x(r, j) = y;
      for (int j = 0; j < spec.m_var; ++j) {
        const double shift = skew[static_cast<std::size_t>(j)];
        const double agree = y > 0 ? p + shift : p - shift;
        out.x(r, spec.m_inv + j) = unit(rng) < agree ? y : -y;
      }
      out.y.push_back(y);
      out.env.push_back(e);
    }
  }
  return out;
}

}  // namespace shiftlab::data
