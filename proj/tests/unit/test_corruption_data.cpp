#include "shiftlab/corruption_data.hpp"
#include "shiftlab/dataset_io.hpp"
#include "shiftlab/errors.hpp"
#include "shiftlab/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

using namespace shiftlab;
using namespace shiftlab::data;

namespace {

// Poisson pmf by explicit product, independent of the lgamma path.
double pmf_oracle(int s, double lambda) {
  double p = std::exp(-lambda);
  for (int k = 1; k <= s; ++k) p *= lambda / k;
  return p;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("shiftlab_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Poisson, PmfMatchesProductOracle) {
  for (double lambda : {0.3, 1.0, 2.5, 7.0}) {
    for (int s = 0; s <= 12; ++s) {
      EXPECT_NEAR(poisson_pmf(s, lambda), pmf_oracle(s, lambda), 1e-14) << lambda << " " << s;
    }
  }
}

TEST(Poisson, RejectsBadArguments) {
  EXPECT_THROW(poisson_pmf(0, 0.0), DomainError);
  EXPECT_THROW(poisson_pmf(0, -1.0), DomainError);
  EXPECT_THROW(poisson_pmf(-1, 1.0), DomainError);
}

TEST(Poisson, DistributionRenormalizes) {
  const auto d = make_severity_distribution(1.0, 5);
  ASSERT_EQ(d.weights.size(), 6u);
  EXPECT_NEAR(std::accumulate(d.weights.begin(), d.weights.end(), 0.0), 1.0, 1e-15);
  double z = 0;
  for (int s = 0; s <= 5; ++s) z += pmf_oracle(s, 1.0);
  for (int s = 0; s <= 5; ++s) EXPECT_NEAR(d.weights[s], pmf_oracle(s, 1.0) / z, 1e-15);
  // Rounded probabilities quoted for lambda = 1.
  const double quoted[] = {0.367, 0.367, 0.184, 0.061, 0.015, 0.003};
  for (int s = 0; s <= 5; ++s) EXPECT_NEAR(d.weights[s], quoted[s], 2e-3);
}

TEST(Poisson, AssignmentIsDeterministic) {
  const auto d = make_severity_distribution(1.0, 5);
  EXPECT_EQ(assign_severities(1000, d, 9), assign_severities(1000, d, 9));
  EXPECT_NE(assign_severities(1000, d, 9), assign_severities(1000, d, 10));
}

TEST(Poisson, SeverityFiveCount) {
  const auto d = make_severity_distribution(1.0, 5);
  const auto s = assign_severities(60000, d, 123);
  double z = 0;
  for (int k = 0; k <= 5; ++k) z += pmf_oracle(k, 1.0);
  const double expected = pmf_oracle(5, 1.0) * 60000 / z;
  const auto count = static_cast<double>(std::count(s.begin(), s.end(), 5));
  EXPECT_NEAR(count, expected, 0.2 * expected);
}

TEST(Poisson, ChiSquareGoodnessOfFit) {
  const auto d = make_severity_distribution(1.0, 5);
  LabeledSource src;
  src.x = Matrix::Constant(20000, 4, 0.5);
  src.y.assign(20000, 0);
  const auto ds = build_corrupted_dataset(src, CorruptionKind::gaussian, 1.0, 77);
  const auto counts = ds.severity_counts();
  double chi2 = 0;
  for (int s = 0; s <= 5; ++s) {
    const double e = d.weights[s] * 20000;
    chi2 += (counts[s] - e) * (counts[s] - e) / e;
  }
  // Upper 1% point of chi-square with 5 degrees of freedom.
  EXPECT_LT(chi2, 15.086);
}

TEST(Corruption, SeverityZeroIsIdentityAndDrawsNothing) {
  Rng rng(5);
  const Vector x = Vector::LinSpaced(16, 0.0, 1.0);
  Rng before = rng;
  EXPECT_EQ(apply_gaussian_noise(x, 0, rng), x);
  EXPECT_EQ(apply_shot_noise(x, 0, rng), x);
  EXPECT_EQ(rng, before);
}

TEST(Corruption, RejectsOutOfRangeSeverity) {
  Rng rng(1);
  const Vector x = Vector::Constant(3, 0.5);
  EXPECT_THROW(apply_gaussian_noise(x, 6, rng), DomainError);
  EXPECT_THROW(apply_shot_noise(x, -1, rng), DomainError);
}

TEST(Corruption, OutputStaysInUnitBox) {
  Rng rng(2);
  const Vector x = Vector::LinSpaced(64, 0.0, 1.0);
  for (int s = 1; s <= 5; ++s) {
    for (const Vector& y : {apply_gaussian_noise(x, s, rng), apply_shot_noise(x, s, rng)}) {
      EXPECT_GE(y.minCoeff(), 0.0);
      EXPECT_LE(y.maxCoeff(), 1.0);
    }
  }
}

TEST(Corruption, MeanAbsoluteDeviationIncreasesWithSeverity) {
  const Vector x = Vector::LinSpaced(32, 0.2, 0.8);
  for (auto kind : {CorruptionKind::gaussian, CorruptionKind::shot}) {
    double prev = 0.0;
    for (int s = 1; s <= 5; ++s) {
      Rng rng(100 + s);
      double mad = 0.0;
      for (int r = 0; r < 1000; ++r) mad += (apply_corruption(kind, x, s, rng) - x).cwiseAbs().mean();
      mad /= 1000;
      EXPECT_GT(mad, prev) << to_string(kind) << " severity " << s;
      prev = mad;
    }
  }
}

TEST(Corruption, ShotNoiseMeanMatchesClippedPoisson) {
  const Vector x = Vector::Constant(1, 0.4);
  for (int s = 1; s <= 5; ++s) {
    Rng rng(40 + s);
    const double c = default_corruption_table().shot_photons[s - 1];
    // E[min(K / c, 1)] and Var for K ~ Poisson(0.4 c), summed from the pmf.
    double mean = 0.0, second = 0.0, p = std::exp(-0.4 * c);
    for (int k = 0; k < 400; ++k) {
      const double v = std::min(k / c, 1.0);
      mean += p * v;
      second += p * v * v;
      p *= 0.4 * c / (k + 1);
    }
    const int n = 20000;
    double sum = 0.0;
    for (int r = 0; r < n; ++r) sum += apply_shot_noise(x, s, rng)(0);
    const double se = std::sqrt((second - mean * mean) / n);
    EXPECT_NEAR(sum / n, mean, 3 * se) << "severity " << s;
  }
}

TEST(Corruption, DatasetIndependentOfWorkerCount) {
  Rng rng(3);
  const auto src = make_toy_images(500, ToyImageSpec{}, rng);
  BuildOptions one;
  BuildOptions four;
  four.workers = 4;
  const auto a = build_corrupted_dataset(src, CorruptionKind::shot, 1.0, 11, one);
  const auto b = build_corrupted_dataset(src, CorruptionKind::shot, 1.0, 11, four);
  EXPECT_EQ(a.x, b.x);
  EXPECT_EQ(a.severity, b.severity);
}

TEST(Corruption, CleanRowsEqualSource) {
  Rng rng(4);
  const auto src = make_toy_images(300, ToyImageSpec{}, rng);
  const auto ds = build_corrupted_dataset(src, CorruptionKind::gaussian, 1.0, 5);
  ASSERT_EQ(ds.size(), src.size());
  for (std::size_t i : ds.indices_with_severity(0)) {
    EXPECT_EQ(ds.x.row(static_cast<Eigen::Index>(i)), src.x.row(static_cast<Eigen::Index>(i)));
  }
  EXPECT_EQ(ds.y, src.y);
}

TEST(Corruption, BuildRejectsNoneKind) {
  LabeledSource src;
  src.x = Matrix::Zero(2, 2);
  src.y = {0, 1};
  EXPECT_THROW(build_corrupted_dataset(src, CorruptionKind::none, 1.0, 0), DomainError);
  EXPECT_THROW(build_corrupted_dataset(src, CorruptionKind::gaussian, 0.0, 0), DomainError);
}

TEST(SyntheticEnvs, InvariantBlockEqualsLabelAndSpuriousAgreementMatchesP) {
  SyntheticEnvSpec spec;
  spec.n = 4000;
  const auto envs = make_synthetic_envs(spec, 8);
  ASSERT_EQ(envs.size(), 3 * spec.n);
  std::vector<double> agree(3, 0.0);
  for (std::size_t i = 0; i < envs.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (int j = 0; j < spec.m_inv; ++j) EXPECT_EQ(envs.x(r, j), envs.y[i]);
    for (int j = spec.m_inv; j < spec.dim(); ++j) agree[envs.env[i]] += envs.x(r, j) == envs.y[i];
  }
  for (int e = 0; e < 3; ++e) {
    const double rate = agree[e] / (spec.n * spec.m_var);
    EXPECT_NEAR(rate, spec.p[e], 0.01) << "env " << e;
  }
}

TEST(SyntheticEnvs, DomainSkewKeepsAgreementRate) {
  SyntheticEnvSpec spec;
  spec.n = 4000;
  spec.domain_skew = 0.5;
  const auto envs = make_synthetic_envs(spec, 8);
  for (int e = 0; e < 3; ++e) {
    double agree = 0;
    const auto rows = envs.indices_of_env(e);
    for (std::size_t i : rows) {
      for (int j = spec.m_inv; j < spec.dim(); ++j) {
        agree += envs.x(static_cast<Eigen::Index>(i), j) == envs.y[i];
      }
    }
    EXPECT_NEAR(agree / (rows.size() * spec.m_var), spec.p[e], 0.02);
  }
}

TEST(DatasetIo, RoundTripsExactly) {
  Rng rng(6);
  const auto src = make_toy_images(200, ToyImageSpec{}, rng);
  const auto ds = build_corrupted_dataset(src, CorruptionKind::gaussian, 1.5, 21);
  const auto dir = temp_dir("dataset");
  io::save_dataset(ds, dir);
  const auto back = io::load_dataset(dir);
  EXPECT_EQ(back.x, ds.x);
  EXPECT_EQ(back.y, ds.y);
  EXPECT_EQ(back.severity, ds.severity);
  EXPECT_EQ(back.kind, ds.kind);
  EXPECT_EQ(back.seed, ds.seed);
  EXPECT_EQ(back.dist.lambda, ds.dist.lambda);
  EXPECT_EQ(back.dist.weights, ds.dist.weights);
  const auto manifest = io::read_manifest(dir / "manifest.txt");
  EXPECT_EQ(manifest.at("kind"), "gaussian");
  EXPECT_EQ(manifest.count("count_0"), 1u);
  std::filesystem::remove_all(dir);
}

TEST(DatasetIo, MissingDirectoryIsIoError) {
  EXPECT_THROW(io::load_dataset("/nonexistent/shiftlab"), IoError);
}

TEST(SeedSequence, NamedStreamsAreStableAndDistinct) {
  const SeedSequence a(42);
  EXPECT_EQ(a.seed("data"), SeedSequence(42).seed("data"));
  EXPECT_NE(a.seed("data"), a.seed("init"));
  EXPECT_NE(a.seed("noise", 0), a.seed("noise", 1));
  EXPECT_NE(a.child("data").seed("x"), a.child("init").seed("x"));
  EXPECT_EQ(fnv1a64(""), 14695981039346656037ull);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cull);
}
