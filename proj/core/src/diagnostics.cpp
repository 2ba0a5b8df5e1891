#include "shiftlab/diagnostics.hpp"

#include "shiftlab/errors.hpp"
#include "shiftlab/rng.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

namespace shiftlab::diagnostics {

using Matrix = Eigen::MatrixXd;
using models::ParamGroup;

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void finish(SpectrumReport& r, std::vector<double> values, int k) {
  std::sort(values.begin(), values.end(), std::greater<>());
  if (static_cast<int>(values.size()) > k) values.resize(static_cast<std::size_t>(k));
  r.eigenvalues = std::move(values);
  if (r.eigenvalues.size() >= 5 && r.eigenvalues[4] != 0.0) {
    r.ratio_1_5 = r.eigenvalues[0] / r.eigenvalues[4];
  }
}

Vector random_unit(Eigen::Index n, Rng& rng) {
  std::normal_distribution<double> nd;
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = nd(rng);
  return v / v.norm();
}

void orthogonalize(Vector& w, const std::vector<Vector>& basis) {
  // Two passes of classical Gram-Schmidt.
  for (int pass = 0; pass < 2; ++pass) {
    for (const auto& q : basis) w -= q.dot(w) * q;
  }
}

// Classifier-group gradient function bound to a model, restoring parameters
// after every call.
GradFn model_grad_fn(DualHeadModel& model, const sharpdro::LossFn& loss_fn, const Batch& batch,
                     const Vector& theta) {
  return [&model, &loss_fn, &batch, theta](const Vector& p, Vector* grad) {
    model.set_flat(ParamGroup::classifier, p);
    double v = 0.0;
    try {
      v = loss_fn(model, batch, grad);
    } catch (...) {
      model.set_flat(ParamGroup::classifier, theta);
      throw;
    }
    model.set_flat(ParamGroup::classifier, theta);
    return v;
  };
}

}  // namespace

double gradient_variance(const std::vector<Vector>& per_env_grads) {
  if (per_env_grads.size() < 2) throw DomainError("gradient_variance: need at least two environments");
  const Eigen::Index n = per_env_grads.front().size();
  for (const auto& g : per_env_grads) {
    if (g.size() != n) throw DomainError("gradient_variance: misaligned gradients");
  }
  if (n == 0) return 0.0;
  const double e = static_cast<double>(per_env_grads.size());
  Vector mean = Vector::Zero(n);
  for (const auto& g : per_env_grads) mean += g;
  mean /= e;
  Vector var = Vector::Zero(n);
  for (const auto& g : per_env_grads) var += (g - mean).cwiseAbs2();
  var /= e;
  return var.mean();
}

std::string to_string(SpectrumMethod m) { return m == SpectrumMethod::lanczos ? "lanczos" : "dense"; }

Vector finite_difference_hvp(const GradFn& f, const Vector& x, const Vector& v, double h) {
  Vector gp;
  Vector gm;
  f(x + h * v, &gp);
  f(x - h * v, &gm);
  return (gp - gm) / (2.0 * h);
}

SpectrumReport lanczos_top_k(const Hvp& hvp, Eigen::Index n, int k, int iters, std::uint64_t seed) {
  if (k < 1) throw DomainError("lanczos: k must be >= 1");
  if (n < 1) throw DomainError("lanczos: empty operator");
  if (iters <= 0) iters = 3 * k;
  SpectrumReport r;
  r.method = SpectrumMethod::lanczos;
  Rng rng(seed);

  std::vector<Vector> basis;
  std::vector<double> alpha;
  std::vector<double> beta;
  Vector q = random_unit(n, rng);
  basis.push_back(q);
  for (int j = 0; j < iters; ++j) {
    Vector w = hvp(q);
    const double a = q.dot(w);
    alpha.push_back(a);
    orthogonalize(w, basis);
    ++r.iterations;
    if (j + 1 == iters || static_cast<Eigen::Index>(basis.size()) == n) break;
    const double b = w.norm();
    if (b <= 1e-10 * std::max(1.0, std::abs(a))) {
      r.breakdown = true;
      Vector fresh = random_unit(n, rng);
      orthogonalize(fresh, basis);
      const double fn = fresh.norm();
      if (fn < 1e-12) break;
      beta.push_back(0.0);
      q = fresh / fn;
    } else {
      beta.push_back(b);
      q = w / b;
    }
    basis.push_back(q);
  }

  const auto m = static_cast<Eigen::Index>(alpha.size());
  Matrix t = Matrix::Zero(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    t(i, i) = alpha[static_cast<std::size_t>(i)];
    if (i + 1 < m) {
      t(i, i + 1) = beta[static_cast<std::size_t>(i)];
      t(i + 1, i) = beta[static_cast<std::size_t>(i)];
    }
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(t, Eigen::EigenvaluesOnly);
  const Vector ev = es.eigenvalues();
  if (r.breakdown) spdlog::debug("lanczos: breakdown after {} iterations", r.iterations);
  finish(r, std::vector<double>(ev.data(), ev.data() + ev.size()), k);
  return r;
}

SpectrumReport dense_top_k(const Hvp& hvp, Eigen::Index n, int k) {
  if (n > kDenseLimit) {
    throw DomainError("dense Hessian refused: " + std::to_string(n) + " parameters exceeds " +
                      std::to_string(kDenseLimit));
  }
  Matrix h(n, n);
  for (Eigen::Index i = 0; i < n; ++i) h.col(i) = hvp(Vector::Unit(n, i));
  const Matrix sym = 0.5 * (h + h.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> es(sym, Eigen::EigenvaluesOnly);
  SpectrumReport r;
  r.method = SpectrumMethod::dense;
  r.iterations = static_cast<int>(n);
  const Vector ev = es.eigenvalues();
  finish(r, std::vector<double>(ev.data(), ev.data() + ev.size()), k);
  return r;
}

SpectrumReport hessian_lanczos(DualHeadModel& model, const sharpdro::LossFn& loss_fn,
                               const Batch& batch, int k, int iters, std::uint64_t seed) {
  const Vector theta = model.flat(ParamGroup::classifier);
  const GradFn f = model_grad_fn(model, loss_fn, batch, theta);
  return lanczos_top_k([&](const Vector& v) { return finite_difference_hvp(f, theta, v); },
                       theta.size(), k, iters, seed);
}

SpectrumReport hessian_dense(DualHeadModel& model, const sharpdro::LossFn& loss_fn,
                             const Batch& batch, int k) {
  const Vector theta = model.flat(ParamGroup::classifier);
  if (theta.size() > kDenseLimit) {
    throw DomainError("dense Hessian refused: model has " + std::to_string(theta.size()) +
                      " parameters");
  }
  const GradFn f = model_grad_fn(model, loss_fn, batch, theta);
  return dense_top_k([&](const Vector& v) { return finite_difference_hvp(f, theta, v); },
                     theta.size(), k);
}

namespace {

template <typename Fn>
SeverityTable per_severity(const data::CorruptedDataset& ds, Fn&& fn) {
  SeverityTable t;
  for (int s = 0; s <= ds.dist.max_severity; ++s) {
    const auto rows = ds.indices_with_severity(s);
    if (rows.empty()) {
      t.notes.push_back("severity " + std::to_string(s) + " has no examples; omitted");
      continue;
    }
    const Batch b = sharpdro::to_batch(ds.subset(rows));
    t.severity.push_back(s);
    t.value.push_back(fn(b));
    t.count.push_back(rows.size());
  }
  return t;
}

}  // namespace

SeverityTable sharpness_by_severity(DualHeadModel& model, const data::CorruptedDataset& dataset,
                                    double rho) {
  const auto loss = sharpdro::mean_cross_entropy();
  return per_severity(dataset,
                      [&](const Batch& b) { return sharpdro::sharpness(loss, model, b, rho); });
}

SeverityTable grad_norm_by_severity(DualHeadModel& model, const data::CorruptedDataset& dataset) {
  return per_severity(dataset, [&](const Batch& b) {
    Vector g;
    models::mean_class_loss(model, b, &g, ParamGroup::classifier);
    return g.norm();
  });
}

std::string to_csv(const SeverityTable& table, const std::string& value_name) {
  std::string out = "severity," + value_name + ",count\n";
  for (std::size_t i = 0; i < table.severity.size(); ++i) {
    out += std::to_string(table.severity[i]) + "," + fmt_double(table.value[i]) + "," +
           std::to_string(table.count[i]) + "\n";
  }
  return out;
}

std::string to_csv(const SpectrumReport& report) {
  std::string out = "rank,eigenvalue,method\n";
  for (std::size_t i = 0; i < report.eigenvalues.size(); ++i) {
    out += std::to_string(i + 1) + "," + fmt_double(report.eigenvalues[i]) + "," +
           to_string(report.method) + "\n";
  }
  return out;
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw DomainError("spearman: need two equal-length series");
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  const auto n = static_cast<Eigen::Index>(a.size());
  const Eigen::Map<const Vector> x(ra.data(), n);
  const Eigen::Map<const Vector> y(rb.data(), n);
  const Vector xc = x.array() - x.mean();
  const Vector yc = y.array() - y.mean();
  const double den = std::sqrt(xc.squaredNorm() * yc.squaredNorm());
  return den > 0 ? xc.dot(yc) / den : 0.0;
}

}  // namespace shiftlab::diagnostics
