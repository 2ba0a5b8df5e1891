#include "shiftlab/errors.hpp"
#include "shiftlab/hood.hpp"
#include "shiftlab/toy_models.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <set>

using namespace shiftlab;
using namespace shiftlab::hood;

namespace {

VibSpec small_spec() {
  VibSpec s;
  s.input_dim = 6;
  s.latent = 2;
  s.classes = 3;
  s.domains = 2;
  s.ova_hidden = 4;
  return s;
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> nd;
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(g);
  return m;
}

}  // namespace

TEST(Kl, ClosedFormMatchesMonteCarlo) {
  Matrix mu(2, 2), lv(2, 2);
  mu << 0.5, -1.0, 0.0, 2.0;
  lv << 0.0, -1.0, 0.7, 0.2;
  // Rowwise: KL(N(mu, e^lv) || N(0, 1)) estimated from samples.
  std::mt19937_64 g(1);
  std::normal_distribution<double> nd;
  double mc = 0.0;
  const int draws = 200000;
  for (int t = 0; t < draws; ++t) {
    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < 2; ++j) {
        const double sd = std::exp(0.5 * lv(i, j));
        const double e = nd(g);
        const double z = mu(i, j) + sd * e;
        mc += (-0.5 * e * e - std::log(sd)) - (-0.5 * z * z);
      }
    }
  }
  mc /= draws * 2.0;
  EXPECT_NEAR(kl_standard_normal(mu, lv), mc, 0.02);
  EXPECT_DOUBLE_EQ(kl_standard_normal(Matrix::Zero(3, 2), Matrix::Zero(3, 2)), 0.0);
}

TEST(Kl, Reparameterize) {
  Matrix mu = Matrix::Constant(1, 2, 1.0);
  Matrix lv(1, 2);
  lv << 0.0, std::log(4.0);
  Matrix e = Matrix::Constant(1, 2, 0.5);
  const Matrix z = reparameterize(mu, lv, e);
  EXPECT_DOUBLE_EQ(z(0, 0), 1.5);
  EXPECT_DOUBLE_EQ(z(0, 1), 2.0);
}

TEST(Elbo, GraphMatchesPlainAndGradientMatchesFiniteDifference) {
  Rng rng(2);
  VibModel model(small_spec(), rng);
  const Matrix x = random_matrix(5, 6, 3);
  const std::vector<int> y{0, 1, 2, 0, 1};
  const std::vector<int> d{0, 1, 1, 0, 0};
  Rng nr(4);
  const auto noise = ElboNoise::draw(5, 2, 2, nr);

  ad::Tape tape;
  const auto p = model.bind(tape, true);
  ElboTerms terms;
  ad::Var e = elbo_graph(model, p, tape.constant(x), y, d, noise, {}, &terms);
  tape.backward(e);
  const Vector g = model.gather_grad(p);
  EXPECT_NEAR(elbo(model, x, y, d, noise).total, terms.total, 1e-12);
  EXPECT_NEAR(terms.total, terms.content_term + terms.style_term + terms.reconstruction -
                               terms.kl_content - terms.kl_style,
              1e-12);

  // Flat layout: four encoder tensors (content mu/logvar, style mu/logvar),
  // then the class and domain heads. The crossed terms do not train the
  // heads, so head coordinates match the ELBO without them.
  const auto sp = small_spec();
  const Eigen::Index heads_begin = 4 * (sp.input_dim * sp.latent + sp.latent);
  const Eigen::Index heads_end =
      heads_begin + sp.latent * sp.classes + sp.classes + sp.latent * sp.domains + sp.domains;
  ElboWeights no_crossed;
  no_crossed.disentangle = 0.0;

  const Vector theta = model.flat();
  const double h = 1e-6;
  int checked = 0;
  int heads = 0;
  for (Eigen::Index i = 0; i < theta.size(); i += (i >= heads_begin && i < heads_end) ? 1 : 7) {
    const bool head = i >= heads_begin && i < heads_end;
    const ElboWeights w = head ? no_crossed : ElboWeights{};
    Vector t = theta;
    t(i) += h;
    model.set_flat(t);
    const double up = elbo(model, x, y, d, noise, w).total;
    t(i) -= 2 * h;
    model.set_flat(t);
    const double down = elbo(model, x, y, d, noise, w).total;
    const double fd = (up - down) / (2 * h);
    EXPECT_NEAR(g(i), fd, 1e-5 * std::max(1.0, std::abs(fd))) << "coordinate " << i;
    ++checked;
    heads += head ? 1 : 0;
  }
  model.set_flat(theta);
  EXPECT_GT(checked, 10);
  EXPECT_EQ(heads, heads_end - heads_begin);
}

TEST(Elbo, CrossedTermsAreBoundedByChance) {
  Rng rng(5);
  VibSpec s = small_spec();
  s.init_scale = 8.0;
  VibModel model(s, rng);
  const Matrix x = random_matrix(20, 6, 6);
  std::vector<int> y(20), d(20);
  for (int i = 0; i < 20; ++i) {
    y[i] = i % 3;
    d[i] = i % 2;
  }
  Rng nr(1);
  ElboWeights w;
  w.kl = 0;
  w.reconstruction = 0;
  const auto t = elbo(model, x, y, d, ElboNoise::draw(20, 2, 1, nr), w);
  // content_term = -CE(y|c) + min(CE(d|c), log D) <= log D.
  EXPECT_LE(t.content_term, std::log(2.0) + 1e-12);
  EXPECT_LE(t.style_term, std::log(3.0) + 1e-12);
}

TEST(Elbo, RejectsBadLabels) {
  Rng rng(5);
  VibModel model(small_spec(), rng);
  Rng nr(1);
  const auto noise = ElboNoise::draw(2, 2, 1, nr);
  const Matrix x = Matrix::Zero(2, 6);
  const std::vector<int> y{0, 3};
  const std::vector<int> d{0, 1};
  EXPECT_THROW(elbo(model, x, y, d, noise), DomainError);
}

TEST(Pgd, StaysInBoxAndDescends) {
  const Matrix target = Matrix::Constant(2, 3, 1.0);
  InputObjective f = [&](const Matrix& x, Matrix* g) {
    if (g) *g = 2 * (x - target);
    return (x - target).squaredNorm();
  };
  const Matrix x0 = Matrix::Zero(2, 3);
  const Matrix x = pgd_minimize(f, x0, 0.03, 15);
  EXPECT_LE((x - x0).cwiseAbs().maxCoeff(), 0.45 + 1e-12);
  EXPECT_NEAR(x(0, 0), 0.45, 1e-12);
  EXPECT_LT(f(x, nullptr), f(x0, nullptr));
  EXPECT_EQ(pgd_minimize(f, x0, 0.03, 0), x0);
  EXPECT_THROW(pgd_minimize(f, x0, 0.0, 3), DomainError);
}

TEST(Pgd, ProjectionBindsWhenStepsOvershoot) {
  // Target inside the box: sign steps oscillate around it within epsilon.
  const Matrix target = Matrix::Constant(1, 1, 0.1);
  InputObjective f = [&](const Matrix& x, Matrix* g) {
    if (g) *g = 2 * (x - target);
    return (x - target).squaredNorm();
  };
  const Matrix x = pgd_minimize(f, Matrix::Zero(1, 1), 0.04, 10);
  EXPECT_LE(std::abs(x(0, 0) - 0.1), 0.04 + 1e-12);
}

TEST(Augment, ObjectiveGradientsMatchFiniteDifference) {
  Rng rng(8);
  VibModel model(small_spec(), rng);
  const Matrix x0 = random_matrix(3, 6, 9);
  const std::vector<int> y{0, 2, 1};
  const std::vector<int> d{1, 0, 1};
  const Matrix x = x0 + 0.1 * random_matrix(3, 6, 10);
  for (const auto& f : {positive_objective(model, x0, d, false), positive_objective(model, x0, d, true),
                        negative_objective(model, x0, y)}) {
    Matrix g;
    f(x, &g);
    for (Eigen::Index i = 0; i < x.size(); i += 3) {
      Matrix a = x, b = x;
      a.data()[i] += 1e-6;
      b.data()[i] -= 1e-6;
      const double fd = (f(a, nullptr) - f(b, nullptr)) / 2e-6;
      EXPECT_NEAR(g.data()[i], fd, 1e-5 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(Augment, PositiveAndNegativeMoveTheirTargets) {
  Rng rng(11);
  VibModel model(small_spec(), rng);
  const Matrix x = random_matrix(8, 6, 12);
  std::vector<int> y(8), d(8);
  for (int i = 0; i < 8; ++i) {
    y[i] = i % 3;
    d[i] = i % 2;
  }
  const auto neg = negative_objective(model, x, y);
  const Matrix xn = negative_augment(model, x, y);
  EXPECT_LT(neg(xn, nullptr), neg(x, nullptr));
  const auto pos = positive_objective(model, x, d, false);
  const Matrix xp = positive_augment(model, x, d);
  EXPECT_LT(pos(xp, nullptr), pos(x, nullptr));
  EXPECT_LE((xp - x).cwiseAbs().maxCoeff(), kDefaultEpsilon * kDefaultSteps + 1e-12);
}

TEST(Pool, BuildAndRoundTrip) {
  Rng rng(13);
  VibModel model(small_spec(), rng);
  const Matrix x = random_matrix(4, 6, 14);
  const std::vector<int> y{0, 1, 2, 0};
  const std::vector<int> d{0, 1, 0, 1};
  const std::vector<std::size_t> src{10, 11, 12, 13};
  const auto pool = build_pool(model, x, y, d, src, {0.02, 3});
  ASSERT_EQ(pool.size(), 4u);
  EXPECT_EQ(pool.steps, 3);
  const auto pr = pool.pair(2);
  EXPECT_EQ(pr.source, 12u);
  EXPECT_EQ(pr.x_bar, pool.x_bar.row(2).transpose());

  const auto dir = std::filesystem::temp_directory_path() / "shiftlab_test_pool";
  std::filesystem::remove_all(dir);
  save_pool(pool, dir);
  const auto back = load_pool(dir);
  EXPECT_EQ(back.x_bar, pool.x_bar);
  EXPECT_EQ(back.x_hat, pool.x_hat);
  EXPECT_EQ(back.y, pool.y);
  EXPECT_EQ(back.d, pool.d);
  EXPECT_EQ(back.source, pool.source);
  EXPECT_EQ(back.epsilon, pool.epsilon);
  std::filesystem::remove_all(dir);
}

TEST(Toy, BalancedDeterministicAndStyleShift) {
  ToySpec spec;
  const auto a = make_toy(64, spec, 1);
  const auto b = make_toy(64, spec, 1);
  EXPECT_EQ(a.x, b.x);
  std::vector<int> per_cell(16, 0);
  for (std::size_t i = 0; i < a.size(); ++i) per_cell[a.y[i] * 4 + a.d[i]]++;
  for (int c : per_cell) EXPECT_EQ(c, 4);

  ToySpec quiet = spec;
  quiet.noise = 1e-9;
  const auto base = make_toy(16, quiet, 2);
  const auto shifted = make_toy(16, quiet, 2, true);
  EXPECT_TRUE(base.x.leftCols(8).isApprox(shifted.x.leftCols(8), 1e-6));
  EXPECT_FALSE(base.x.rightCols(8).isApprox(shifted.x.rightCols(8), 1e-3));
}

TEST(Scoring, ThresholdAndPseudoLabels) {
  EXPECT_TRUE(is_ood(0.5));
  EXPECT_FALSE(is_ood(0.49));
  Rng rng(15);
  VibModel model(small_spec(), rng);
  const Matrix x = random_matrix(6, 6, 16);
  const auto all = pseudo_labels(model, x, 0.0);
  const auto none = pseudo_labels(model, x, 1.01);
  const auto pred = models::argmax_rows(model.content_logits(x));
  for (std::size_t i = 0; i < 6; ++i) {
    ASSERT_TRUE(all[i].has_value());
    EXPECT_EQ(*all[i], pred[i]);
    EXPECT_FALSE(none[i].has_value());
  }
  const Vector s = hood_ood_score(model, x);
  EXPECT_GE(s.minCoeff(), 0.0);
  EXPECT_LE(s.maxCoeff(), 1.0);
}

TEST(AugModeNames, RoundTrip) {
  for (auto m : {AugMode::both, AugMode::pos, AugMode::neg, AugMode::none}) {
    EXPECT_EQ(aug_mode_from_string(to_string(m)), m);
  }
  EXPECT_FALSE(aug_mode_from_string("all").has_value());
}

TEST(HoodTrain, ShortRunIsDeterministicAndReportsScores) {
  ToySpec spec;
  const auto train = make_toy(160, spec, 1);
  const auto test = make_toy(80, spec, 2);
  HoodConfig c;
  c.iterations = 40;
  c.augment.steps = 3;
  c.seed = 9;
  const auto a = hood_train(c, train, test);
  const auto b = hood_train(c, train, test);
  EXPECT_TRUE(a.record.same_metrics(b.record));
  EXPECT_EQ(a.pool.x_hat, b.pool.x_hat);
  for (const char* key : {"acc_content", "acc_style", "score_clean", "score_x_bar", "score_x_hat"}) {
    EXPECT_TRUE(a.record.summary_value(key).has_value()) << key;
  }
  EXPECT_GT(a.pool.size(), 0u);
  c.aug = AugMode::none;
  EXPECT_EQ(hood_train(c, train, test).pool.size(), 0u);
}

TEST(HoodTrain, InvalidConfig) {
  ToySpec spec;
  const auto train = make_toy(16, spec, 1);
  HoodConfig c;
  c.augment.epsilon = -1;
  c.iterations = 0;
  EXPECT_THROW(hood_train(c, train, train), ConfigError);
}
