#include "shiftlab/autodiff.hpp"
#include "shiftlab/errors.hpp"
#include "shiftlab/optim.hpp"
#include "shiftlab/toy_models.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <functional>

using namespace shiftlab;
using models::Batch;
using models::DualHeadModel;
using models::ModelSpec;
using models::ParamGroup;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace {

Batch random_batch(int n, int dim, int classes, int domains, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> nd;
  Batch b;
  b.x.resize(n, dim);
  for (Eigen::Index i = 0; i < b.x.size(); ++i) b.x.data()[i] = nd(rng);
  for (int i = 0; i < n; ++i) {
    b.y.push_back(static_cast<int>(rng() % static_cast<unsigned>(classes)));
    b.group.push_back(static_cast<int>(rng() % static_cast<unsigned>(domains)));
  }
  return b;
}

double max_rel_err(const Vector& a, const Vector& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(1e-8, b.cwiseAbs().maxCoeff());
}

// Central differences with step 1e-5.
Vector fd_grad(const std::function<double(const Vector&)>& f, const Vector& x) {
  const double h = 1e-5;
  Vector g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vector xp = x;
    Vector xm = x;
    xp(i) += h;
    xm(i) -= h;
    g(i) = (f(xp) - f(xm)) / (2 * h);
  }
  return g;
}

// Scalar function of one matrix input exercising every tape op.
double composite(const Matrix& a, Vector* grad) {
  ad::Tape t;
  ad::Var x = t.variable(a);
  ad::Var w = t.constant(Matrix::Constant(a.cols(), 3, 0.3) + Matrix::Identity(a.cols(), 3));
  ad::Var h = ad::matmul(ad::tanh(x), w);
  ad::Var r = ad::add_row(h, t.constant(Matrix::Constant(1, 3, 0.1)));
  ad::Var s = ad::add(ad::sigmoid(r), ad::relu(ad::sub(r, ad::scale(r, 0.5))));
  ad::Var e = ad::mul(ad::exp(ad::scale(s, 0.2)), ad::log(ad::add_scalar(ad::square(s), 1.0)));
  ad::Var c = ad::hcat(ad::cols(e, 0, 2), ad::neg(ad::cols(e, 2, 1)));
  const std::vector<int> labels{0, 2, 1, 2};
  ad::Var ce = ad::cross_entropy(ad::mul(c, Matrix::Constant(c.rows(), c.cols(), 1.5)), labels);
  ad::Var sm = ad::row_sum(ad::softmax(c));
  ad::Var bce = ad::bce_with_logits(c, Matrix::Ones(c.rows(), c.cols()),
                                    Matrix::Constant(c.rows(), c.cols(), 0.25));
  Vector w2 = Vector::LinSpaced(c.rows(), 0.5, 1.5);
  ad::Var total = ad::add(ad::add(ad::weighted_sum(ce, w2), ad::mean(sm)), ad::sum(bce));
  total = ad::add(total, ad::mean(ad::pick(ad::log_softmax(c), labels)));
  if (grad) {
    t.backward(total);
    *grad = Eigen::Map<const Vector>(x.grad().data(), x.grad().size());
  }
  return total.scalar();
}

}  // namespace

TEST(Autodiff, EveryOpMatchesFiniteDifferences) {
  Rng rng(1);
  std::normal_distribution<double> nd;
  Matrix a(4, 3);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = nd(rng);
  Vector g;
  composite(a, &g);
  const Vector x = Eigen::Map<const Vector>(a.data(), a.size());
  const Vector fd = fd_grad(
      [&](const Vector& v) {
        Matrix m = Eigen::Map<const Matrix>(v.data(), a.rows(), a.cols());
        return composite(m, nullptr);
      },
      x);
  EXPECT_LT(max_rel_err(g, fd), 1e-6);
}

TEST(Autodiff, PlainHelpersAgreeWithTape) {
  const Matrix logits = (Matrix(2, 3) << 1, 2, 3, -1, 0.5, 4).finished();
  const std::vector<int> y{2, 0};
  ad::Tape t;
  ad::Var v = t.constant(logits);
  EXPECT_TRUE(ad::softmax_rows(logits).isApprox(ad::softmax(v).value(), 1e-15));
  const Vector ce = ad::cross_entropy_rows(logits, y);
  EXPECT_TRUE(ce.isApprox(Vector(ad::cross_entropy(v, y).value()), 1e-15));
  // log(e^1 + e^2 + e^3) - 3
  EXPECT_NEAR(ce(0), std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3.0, 1e-14);
}

TEST(Autodiff, LargeLogitsStayFinite) {
  const Matrix logits = (Matrix(1, 2) << 1000.0, -1000.0).finished();
  const std::vector<int> y{1};
  EXPECT_NEAR(ad::cross_entropy_rows(logits, y)(0), 2000.0, 1e-9);
  EXPECT_TRUE(ad::softmax_rows(logits).allFinite());
}

TEST(Models, ZeroWeightsGiveEqualLogits) {
  Rng rng(2);
  DualHeadModel m(ModelSpec{}, rng);
  m.set_flat(ParamGroup::all, Vector::Zero(static_cast<Eigen::Index>(m.count(ParamGroup::all))));
  const Batch b = random_batch(5, 64, 2, 1, 3);
  const Matrix logits = m.forward_class(b.x);
  EXPECT_TRUE((logits.array() == logits(0, 0)).all());
  const Matrix dl = m.forward_domain(b.x);
  EXPECT_TRUE((dl.array() == dl(0, 0)).all());
}

TEST(Models, ClassLossGradientMatchesFiniteDifferences) {
  for (auto kind : {models::ExtractorKind::mlp, models::ExtractorKind::linear}) {
    ModelSpec spec{kind, 6, 5, 3, 2};
    Rng rng(4);
    DualHeadModel m(spec, rng);
    ASSERT_LE(m.count(ParamGroup::classifier), 1000u);
    const Batch b = random_batch(7, 6, 3, 2, 5);
    Vector g;
    models::mean_class_loss(m, b, &g, ParamGroup::classifier);
    const Vector theta = m.flat(ParamGroup::classifier);
    const Vector fd = fd_grad(
        [&](const Vector& v) {
          DualHeadModel c = m;
          c.set_flat(ParamGroup::classifier, v);
          return models::mean_class_loss(c, b);
        },
        theta);
    EXPECT_LT(max_rel_err(g, fd), 1e-4) << models::to_string(kind);
  }
}

TEST(Models, DomainPathGradientMatchesFiniteDifferences) {
  ModelSpec spec{models::ExtractorKind::mlp, 5, 4, 2, 3};
  Rng rng(6);
  const DualHeadModel m(spec, rng);
  const Batch b = random_batch(6, 5, 2, 3, 7);
  auto loss = [&](const DualHeadModel& model, Vector* grad) {
    ad::Tape t;
    auto p = model.bind(t, ParamGroup::all);
    ad::Var x = t.constant(b.x);
    ad::Var l = ad::mean(ad::cross_entropy(model.domain_logits(p, model.features(p, x)), b.group));
    if (grad) {
      t.backward(l);
      *grad = model.gather_grad(p, ParamGroup::all);
    }
    return l.scalar();
  };
  Vector g;
  loss(m, &g);
  const Vector fd = fd_grad(
      [&](const Vector& v) {
        DualHeadModel c = m;
        c.set_flat(ParamGroup::all, v);
        return loss(c, nullptr);
      },
      m.flat(ParamGroup::all));
  EXPECT_LT(max_rel_err(g, fd), 1e-4);
  // The class head does not touch the domain loss.
  const auto e = static_cast<Eigen::Index>(m.count(ParamGroup::extractor));
  const auto h = static_cast<Eigen::Index>(m.count(ParamGroup::class_head));
  EXPECT_EQ(g.segment(e, h).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Models, MaskedBindingDifferentiatesEffectiveWeights) {
  ModelSpec spec{models::ExtractorKind::linear, 4, 3, 2, 1};
  Rng rng(8);
  const DualHeadModel m(spec, rng);
  const Batch b = random_batch(5, 4, 2, 1, 9);
  Vector mask = Vector::Ones(static_cast<Eigen::Index>(m.count(ParamGroup::extractor)));
  mask(0) = 0;
  mask(5) = 0;
  const Vector w = Vector::Constant(5, 0.2);
  Vector g;
  models::weighted_class_loss(m, b, w, &g, ParamGroup::extractor, &mask);
  // Oracle: the model with masked weights zeroed, differentiated directly.
  DualHeadModel zeroed = m;
  zeroed.set_flat(ParamGroup::extractor, m.flat(ParamGroup::extractor).cwiseProduct(mask));
  Vector g0;
  models::weighted_class_loss(zeroed, b, w, &g0, ParamGroup::extractor);
  EXPECT_TRUE(g.isApprox(g0, 1e-12));
}

TEST(Models, FlatRoundTripAndGroupSizes) {
  Rng rng(10);
  DualHeadModel m(ModelSpec{}, rng);
  const Batch b = random_batch(3, 64, 2, 1, 11);
  const Matrix before = m.forward_class(b.x);
  m.set_flat(ParamGroup::all, m.flat(ParamGroup::all));
  EXPECT_EQ(m.forward_class(b.x), before);
  EXPECT_EQ(m.count(ParamGroup::extractor), 64u * 32u + 32u);
  EXPECT_EQ(m.count(ParamGroup::classifier),
            m.count(ParamGroup::extractor) + m.count(ParamGroup::class_head));
  EXPECT_EQ(models::flat_params(m).size(), static_cast<Eigen::Index>(m.count(ParamGroup::extractor)));
  EXPECT_THROW(m.set_flat(ParamGroup::extractor, Vector::Zero(3)), DomainError);
}

TEST(Models, PerturbingOneCoordinateOnlyMovesDependentOutputs) {
  ModelSpec spec{models::ExtractorKind::mlp, 4, 3, 2, 2};
  Rng rng(12);
  DualHeadModel m(spec, rng);
  const Batch b = random_batch(3, 4, 2, 2, 13);
  const Matrix dom = m.forward_domain(b.x);
  Vector theta = m.flat(ParamGroup::all);
  // First class-head coordinate: class logit column 0 moves, domain logits do not.
  const auto k = static_cast<Eigen::Index>(m.count(ParamGroup::extractor));
  const Matrix cls = m.forward_class(b.x);
  theta(k) += 0.5;
  m.set_flat(ParamGroup::all, theta);
  EXPECT_EQ(m.forward_domain(b.x), dom);
  const Matrix cls2 = m.forward_class(b.x);
  EXPECT_NE(cls2.col(0), cls.col(0));
  EXPECT_EQ(cls2.col(1), cls.col(1));
}

TEST(Models, RowsAreIndependent) {
  Rng rng(14);
  const DualHeadModel m(ModelSpec{}, rng);
  const Batch b = random_batch(6, 64, 2, 1, 15);
  const Matrix all = m.forward_class(b.x);
  for (int i = 0; i < 6; ++i) EXPECT_TRUE(m.forward_class(b.x.row(i)).isApprox(all.row(i), 1e-13));
}

TEST(Models, RejectsInputWidthMismatch) {
  Rng rng(16);
  const DualHeadModel m(ModelSpec{}, rng);
  EXPECT_THROW(models::forward_class(m, Matrix::Zero(2, 10)), DomainError);
}

TEST(Models, ArgmaxTiesGoToLowestIndex) {
  const Matrix m = (Matrix(2, 3) << 1, 1, 0, 0, 2, 2).finished();
  EXPECT_EQ(models::argmax_rows(m), (std::vector<int>{0, 1}));
}

TEST(Models, CheckpointRoundTripsWithMask) {
  Rng rng(17);
  const DualHeadModel m(ModelSpec{models::ExtractorKind::linear, 8, 4, 2, 3}, rng);
  std::vector<unsigned char> mask(m.count(ParamGroup::extractor), 1);
  mask[3] = 0;
  const auto dir = std::filesystem::temp_directory_path() / "shiftlab_test_ckpt";
  std::filesystem::remove_all(dir);
  models::save_checkpoint(dir, m, mask);
  const auto back = models::load_checkpoint(dir);
  EXPECT_EQ(back.model.flat(ParamGroup::all), m.flat(ParamGroup::all));
  EXPECT_EQ(back.model.spec().hidden, 4);
  ASSERT_TRUE(back.mask.has_value());
  EXPECT_EQ(*back.mask, mask);
  std::filesystem::remove_all(dir);
}

TEST(Optim, SgdMatchesHandComputedMomentum) {
  optim::Sgd opt(0.1, 0.9, 0.0);
  Vector p = Vector::Constant(1, 1.0);
  const Vector g = Vector::Constant(1, 2.0);
  opt.step(p, g);  // v = 2, p = 1 - 0.2
  EXPECT_NEAR(p(0), 0.8, 1e-15);
  opt.step(p, g);  // v = 0.9*2 + 2 = 3.8, p = 0.8 - 0.38
  EXPECT_NEAR(p(0), 0.42, 1e-15);
}

TEST(Optim, MaskedStepFreezesMaskedCoordinates) {
  optim::Sgd opt(0.5, 0.9, 0.1);
  Vector p = Vector::LinSpaced(4, 1.0, 4.0);
  const Vector g = Vector::Ones(4);
  const Vector mask = (Vector(4) << 1, 0, 1, 0).finished();
  for (int i = 0; i < 3; ++i) opt.step_masked(p, g, mask);
  EXPECT_EQ(p(1), 2.0);
  EXPECT_EQ(p(3), 4.0);
  EXPECT_LT(p(0), 1.0);
}
