#include "shiftlab/evil.hpp"

#include "shiftlab/diagnostics.hpp"
#include "shiftlab/errors.hpp"
#include "shiftlab/optim.hpp"
#include "shiftlab/sharpdro.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace shiftlab::evil {

using models::Batch;
using models::DualHeadModel;
using models::ParamGroup;

std::size_t ParameterMask::kept() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1));
}

double ParameterMask::sparsity() const {
  return bits.empty() ? 0.0 : 1.0 - static_cast<double>(kept()) / static_cast<double>(bits.size());
}

Vector ParameterMask::as_vector() const {
  Vector v(static_cast<Eigen::Index>(bits.size()));
  for (std::size_t i = 0; i < bits.size(); ++i) v(static_cast<Eigen::Index>(i)) = bits[i] ? 1.0 : 0.0;
  return v;
}

Vector ParameterMask::complement() const { return Vector::Ones(as_vector().size()) - as_vector(); }

namespace {

// Indices ordered by ascending key, lower index first on ties.
std::vector<std::size_t> ascending(const std::vector<std::size_t>& idx, const Vector& key) {
  std::vector<std::size_t> out = idx;
  std::stable_sort(out.begin(), out.end(), [&](std::size_t a, std::size_t b) {
    return key(static_cast<Eigen::Index>(a)) < key(static_cast<Eigen::Index>(b));
  });
  return out;
}

}  // namespace

ParameterMask init_mask_by_magnitude(const Vector& theta, double sparsity) {
  if (!(sparsity > 0.0 && sparsity < 1.0)) throw DomainError("sparsity must lie in (0, 1)");
  const auto n = static_cast<std::size_t>(theta.size());
  if (n == 0) throw DomainError("init_mask_by_magnitude: empty parameter vector");
  auto keep = static_cast<std::size_t>(std::nearbyint((1.0 - sparsity) * static_cast<double>(n)));
  if (n > 1) keep = std::clamp<std::size_t>(keep, 1, n - 1);
  const Vector mag = theta.cwiseAbs();
  if (mag.maxCoeff() == mag.minCoeff()) {
    spdlog::warn("init_mask_by_magnitude: all magnitudes equal, keeping by index order");
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  const Vector neg = -mag;
  const auto order = ascending(idx, neg);
  ParameterMask m;
  m.bits.assign(n, 0);
  for (std::size_t i = 0; i < keep; ++i) m.bits[order[i]] = 1;
  return m;
}

double AnnealSchedule::S(long t) const {
  return 0.5 * alpha * (1.0 + std::cos(static_cast<double>(t) * std::numbers::pi / static_cast<double>(T)));
}

long swap_count(long t, const AnnealSchedule& sched, const ParameterMask& m) {
  if (sched.T < 1) throw DomainError("swap_count: T must be positive");
  if (t < 0 || t > sched.T) throw DomainError("swap_count: t outside [0, T]");
  const auto kept = static_cast<double>(m.kept());
  long k = static_cast<long>(std::nearbyint(kept * sched.S(t)));
  const auto limit = static_cast<long>(std::min(m.kept(), m.size() - m.kept()));
  if (k > limit) {
    spdlog::warn("swap_count: k={} clamped to {}", k, limit);
    k = limit;
  }
  return std::max(k, 0L);
}

ParameterMask update_mask(const ParameterMask& m, const GradientSnapshot& grad_task,
                          const GradientSnapshot& grad_domain, long k) {
  const auto n = static_cast<Eigen::Index>(m.size());
  if (grad_task.grad.size() != n || grad_domain.grad.size() != n) {
    throw DomainError("update_mask: gradients must align with the mask");
  }
  std::vector<std::size_t> kept;
  std::vector<std::size_t> pruned;
  for (std::size_t i = 0; i < m.size(); ++i) (m.bits[i] ? kept : pruned).push_back(i);
  if (k < 0) throw DomainError("update_mask: negative swap count");
  const auto limit = static_cast<long>(std::min(kept.size(), pruned.size()));
  if (k > limit) {
    spdlog::warn("update_mask: k={} clamped to {}", k, limit);
    k = limit;
  }
  ParameterMask out = m;
  if (k == 0) return out;
  const auto drop = ascending(kept, grad_task.grad.cwiseAbs());
  const auto grow = ascending(pruned, grad_domain.grad.cwiseAbs());
  for (long i = 0; i < k; ++i) {
    out.bits[drop[static_cast<std::size_t>(i)]] = 0;
    out.bits[grow[static_cast<std::size_t>(i)]] = 1;
  }
  return out;
}

// Regularizers --------------------------------------------------------------

double irm_penalty_sum(std::span<const Matrix> per_env_logits,
                       std::span<const std::vector<int>> labels) {
  if (per_env_logits.size() != labels.size() || per_env_logits.empty()) {
    throw DomainError("irm_penalty: need matching logits and labels for >= 1 environment");
  }
  double total = 0.0;
  for (std::size_t e = 0; e < per_env_logits.size(); ++e) {
    const Matrix& z = per_env_logits[e];
    if (z.rows() == 0) {
      spdlog::warn("irm_penalty: environment {} is empty, skipped", e);
      continue;
    }
    if (static_cast<std::size_t>(z.rows()) != labels[e].size()) {
      throw DomainError("irm_penalty: label count mismatch");
    }
    const Matrix p = ad::softmax_rows(z);
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const double d = p.row(i).dot(z.row(i)) - z(i, labels[e][static_cast<std::size_t>(i)]);
      total += d * d;
    }
  }
  return total;
}

double irm_penalty(std::span<const Matrix> per_env_logits,
                   std::span<const std::vector<int>> labels) {
  std::size_t count = 0;
  for (const auto& z : per_env_logits) count += static_cast<std::size_t>(z.rows());
  const double sum = irm_penalty_sum(per_env_logits, labels);
  return count ? sum / static_cast<double>(count) : 0.0;
}

ad::Var irm_penalty(ad::Var logits, std::span<const int> labels) {
  ad::Var expected = ad::row_sum(ad::mul(ad::softmax(logits), logits));
  ad::Var d = ad::sub(expected, ad::pick(logits, labels));
  return ad::mean(ad::square(d));
}

double rex_penalty(const Vector& env_losses) {
  if (env_losses.size() < 2) throw DomainError("rex_penalty: need at least two environments");
  const double mu = env_losses.mean();
  return (env_losses.array() - mu).square().mean();
}

ad::Var rex_penalty(const std::vector<ad::Var>& env_losses) {
  if (env_losses.size() < 2) throw DomainError("rex_penalty: need at least two environments");
  ad::Var stacked = env_losses.front();
  for (std::size_t e = 1; e < env_losses.size(); ++e) stacked = ad::hcat(stacked, env_losses[e]);
  ad::Var ones = stacked.tape->constant(Matrix::Ones(1, stacked.cols()));
  ad::Var centered = ad::sub(stacked, ad::matmul(ad::mean(stacked), ones));
  return ad::mean(ad::square(centered));
}

double groupdro_objective(const Vector& env_losses, const Vector& w) {
  if (env_losses.size() != w.size()) throw DomainError("groupdro_objective: size mismatch");
  if ((w.array() < 0).any() || std::abs(w.sum() - 1.0) > 1e-9) {
    throw InvariantError("groupdro_objective: weights are not on the simplex");
  }
  return w.dot(env_losses);
}

Vector evil_sam_perturbation(const Vector& grad, const ParameterMask& m, double rho) {
  if (static_cast<std::size_t>(grad.size()) != m.size()) {
    throw DomainError("evil_sam_perturbation: mask and gradient misaligned");
  }
  return sharpdro::sam_perturbation(grad.cwiseProduct(m.as_vector()), rho);
}

std::string to_string(Regularizer r) {
  switch (r) {
    case Regularizer::erm: return "erm";
    case Regularizer::irm: return "irm";
    case Regularizer::rex: return "rex";
    case Regularizer::dro: return "dro";
  }
  return "unknown";
}

std::optional<Regularizer> regularizer_from_string(const std::string& name) {
  for (auto r : {Regularizer::erm, Regularizer::irm, Regularizer::rex, Regularizer::dro}) {
    if (to_string(r) == name) return r;
  }
  return std::nullopt;
}

// Training ------------------------------------------------------------------

Batch to_batch(const data::SyntheticEnvs& envs) {
  Batch b;
  b.x = envs.x;
  b.y = envs.class_index();
  b.group = envs.env;
  return b;
}

std::vector<unsigned char> invariant_coordinates(const DualHeadModel& model, int m_inv) {
  // The first extractor tensor is W (input x hidden), column-major: W(i, j)
  // sits at j * input + i. Bias entries (MLP) read no input feature.
  const auto& w = model.tensors().front();
  std::vector<unsigned char> out(model.count(ParamGroup::extractor), 0);
  for (Eigen::Index j = 0; j < w.cols(); ++j) {
    for (Eigen::Index i = 0; i < std::min<Eigen::Index>(m_inv, w.rows()); ++i) {
      out[static_cast<std::size_t>(j * w.rows() + i)] = 1;
    }
  }
  return out;
}

double invariant_coverage(const ParameterMask& m, const DualHeadModel& model, int m_inv) {
  const auto inv = invariant_coordinates(model, m_inv);
  if (inv.size() != m.size()) throw DomainError("invariant_coverage: mask size mismatch");
  std::size_t total = 0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < inv.size(); ++i) {
    if (!inv[i]) continue;
    ++total;
    hit += m.bits[i] ? 1 : 0;
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

namespace {

struct EnvIndex {
  int envs = 0;
  std::vector<Vector> mean_weights;  // per env: 1/n_e on its rows
  Vector counts;
};

EnvIndex index_envs(const Batch& b, int envs) {
  EnvIndex ix;
  ix.envs = envs;
  const auto n = static_cast<Eigen::Index>(b.size());
  ix.counts = Vector::Zero(envs);
  for (int g : b.group) ix.counts(g) += 1.0;
  for (int e = 0; e < envs; ++e) {
    Vector w = Vector::Zero(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (b.group[static_cast<std::size_t>(i)] == e) w(i) = 1.0 / ix.counts(e);
    }
    ix.mean_weights.push_back(std::move(w));
  }
  return ix;
}

// Task objective on an already recorded per-example CE column.
ad::Var task_objective(const EvilConfig& cfg, ad::Var logits, ad::Var ce, const Batch& b,
                       const EnvIndex& ix, sharpdro::WorstCaseWeights& dro, bool update_dro) {
  const auto n = static_cast<Eigen::Index>(b.size());
  ad::Var risk = ad::weighted_sum(ce, Vector::Constant(n, 1.0 / static_cast<double>(n)));
  switch (cfg.reg) {
    case Regularizer::erm: return risk;
    case Regularizer::irm:
      return ad::add(risk, ad::scale(irm_penalty(logits, b.y), cfg.penalty_weight));
    case Regularizer::rex: {
      std::vector<ad::Var> losses;
      for (int e = 0; e < ix.envs; ++e) {
        if (ix.counts(e) > 0) losses.push_back(ad::weighted_sum(ce, ix.mean_weights[static_cast<std::size_t>(e)]));
      }
      if (losses.size() < 2) return risk;
      return ad::add(risk, ad::scale(rex_penalty(losses), cfg.penalty_weight));
    }
    case Regularizer::dro: {
      const Vector l = ce.value().col(0);
      Vector env_loss(ix.envs);
      for (int e = 0; e < ix.envs; ++e) env_loss(e) = ix.mean_weights[static_cast<std::size_t>(e)].dot(l);
      if (update_dro) dro = sharpdro::update_group_weights(dro, env_loss, dro.eta);
      Vector w = Vector::Zero(n);
      for (int e = 0; e < ix.envs; ++e) w += dro.values(e) * ix.mean_weights[static_cast<std::size_t>(e)];
      return ad::weighted_sum(ce, w);
    }
  }
  return risk;
}

struct TaskEval {
  double objective = 0.0;
  double ce = 0.0;
  Vector grad;  // classifier group (effective extractor weights, then class head)
};

TaskEval task_gradient(const EvilConfig& cfg, const DualHeadModel& model, const Batch& b,
                       const EnvIndex& ix, const Vector* mask, sharpdro::WorstCaseWeights& dro,
                       bool update_dro) {
  ad::Tape tape;
  const auto p = model.bind(tape, ParamGroup::classifier, mask);
  ad::Var x = tape.constant(b.x);
  ad::Var logits = model.class_logits(p, model.features(p, x));
  ad::Var ce = ad::cross_entropy(logits, b.y);
  ad::Var obj = task_objective(cfg, logits, ce, b, ix, dro, update_dro);
  tape.backward(obj);
  return {obj.scalar(), ce.value().mean(), model.gather_grad(p, ParamGroup::classifier)};
}

struct DomainEval {
  double loss = 0.0;
  Vector extractor_grad;
  Vector head_grad;
};

// Environment prediction through the domain head on the variant features.
DomainEval domain_gradient(const DualHeadModel& model, const Batch& b, const Vector& variant) {
  ad::Tape tape;
  const auto p = model.bind(tape, ParamGroup::all, &variant);
  ad::Var x = tape.constant(b.x);
  ad::Var ce = ad::cross_entropy(model.domain_logits(p, model.features(p, x)), b.group);
  ad::Var loss = ad::mean(ce);
  tape.backward(loss);
  return {loss.scalar(), model.gather_grad(p, ParamGroup::extractor),
          model.gather_grad(p, ParamGroup::domain_head)};
}

// Task CE through the class head on the variant features (recall ablation).
Vector variant_task_gradient(const DualHeadModel& model, const Batch& b, const Vector& variant) {
  ad::Tape tape;
  const auto p = model.bind(tape, ParamGroup::extractor, &variant);
  ad::Var x = tape.constant(b.x);
  ad::Var loss = ad::mean(ad::cross_entropy(model.class_logits(p, model.features(p, x)), b.y));
  tape.backward(loss);
  return model.gather_grad(p, ParamGroup::extractor);
}

}  // namespace

PartitionVariance partition_gradient_variance(const DualHeadModel& model, const ParameterMask& m,
                                              const data::SyntheticEnvs& envs) {
  const Batch all = to_batch(envs);
  const Vector mv = m.as_vector();
  std::vector<Vector> inv;
  std::vector<Vector> var;
  for (int e = 0; e < envs.envs; ++e) {
    const auto rows = envs.indices_of_env(e);
    if (rows.empty()) continue;
    const Batch b = all.subset(rows);
    Vector g;
    models::weighted_class_loss(model, b,
                                Vector::Constant(static_cast<Eigen::Index>(b.size()),
                                                 1.0 / static_cast<double>(b.size())),
                                &g, ParamGroup::extractor, &mv);
    Vector gi(static_cast<Eigen::Index>(m.kept()));
    Vector gv(static_cast<Eigen::Index>(m.size() - m.kept()));
    Eigen::Index a = 0;
    Eigen::Index c = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (m.bits[i]) gi(a++) = g(static_cast<Eigen::Index>(i));
      else gv(c++) = g(static_cast<Eigen::Index>(i));
    }
    inv.push_back(std::move(gi));
    var.push_back(std::move(gv));
  }
  return {diagnostics::gradient_variance(inv), diagnostics::gradient_variance(var)};
}

EvilResult evil_train(const EvilConfig& cfg, const data::SyntheticEnvs& envs) {
  std::vector<std::string> problems;
  if (!(cfg.sparsity > 0.0 && cfg.sparsity < 1.0)) problems.push_back("sparsity must lie in (0, 1)");
  if (!(cfg.alpha > 0.0 && cfg.alpha < 1.0)) problems.push_back("alpha must lie in (0, 1)");
  if (cfg.delta_T < 1) problems.push_back("delta_T must be >= 1");
  if (cfg.t_pre < 0) problems.push_back("t_pre must be >= 0");
  if (cfg.iterations < 1) problems.push_back("iterations must be >= 1");
  if (cfg.t_pre >= cfg.iterations) problems.push_back("t_pre must be below iterations");
  if (envs.envs < 2) problems.push_back("at least two environments are required");
  if (!problems.empty()) throw ConfigError(problems);

  const SeedSequence seeds(cfg.seed);
  Rng init = seeds.stream(substream::kInit);
  models::ModelSpec spec = cfg.model;
  spec.input_dim = static_cast<int>(envs.x.cols());
  spec.classes = 2;
  spec.domains = envs.envs;
  EvilResult out{DualHeadModel(spec, init), ParameterMask{}, RunRecord{}, 0.0, {}};
  DualHeadModel& model = out.model;
  RunRecord& rec = out.record;
  rec.algorithm = cfg.sam ? "evil_sam" : "evil";
  rec.seed = cfg.seed;

  const Batch batch = to_batch(envs);
  const EnvIndex ix = index_envs(batch, envs.envs);
  const std::size_t n_ext = model.count(ParamGroup::extractor);
  const std::size_t n_cls = model.count(ParamGroup::classifier);

  // Invariant path: masked extractor + class head. Variant path: complement
  // of the extractor + domain head.
  optim::Sgd opt_task(cfg.lr, cfg.momentum);
  optim::Sgd opt_var(cfg.domain_lr, cfg.momentum);
  optim::Sgd opt_dom_head(cfg.domain_lr, cfg.momentum);
  auto dro = sharpdro::WorstCaseWeights::uniform_groups(envs.envs, cfg.eta);

  const AnnealSchedule sched{cfg.alpha, cfg.iterations, cfg.delta_T, cfg.t_pre};
  ParameterMask& mask = out.mask;
  Vector task_mask = Vector::Ones(static_cast<Eigen::Index>(n_cls));
  Vector mvec;
  Vector cvec;
  auto set_mask = [&](const ParameterMask& m) {
    mask = m;
    mvec = mask.as_vector();
    cvec = mask.complement();
    task_mask.head(static_cast<Eigen::Index>(n_ext)) = mvec;
  };
  if (cfg.t_pre == 0) set_mask(init_mask_by_magnitude(model.flat(ParamGroup::extractor), cfg.sparsity));

  for (long t = 1; t <= cfg.iterations; ++t) {
    const bool sparse = !mask.bits.empty();
    MetricRow* row = (cfg.log_every > 0 && (t % cfg.log_every == 0 || t == cfg.iterations))
                         ? &rec.add_row(t)
                         : nullptr;
    Vector theta = model.flat(ParamGroup::classifier);

    if (!sparse) {
      // Dense ERM pre-training.
      Vector g;
      const double loss = models::mean_class_loss(model, batch, &g, ParamGroup::classifier);
      opt_task.step(theta, g);
      model.set_flat(ParamGroup::classifier, theta);
      if (row) row->scalars["task_loss"] = loss;
      if (t == cfg.t_pre) {
        set_mask(init_mask_by_magnitude(model.flat(ParamGroup::extractor), cfg.sparsity));
      }
      continue;
    }

    // Invariant learning on theta_inv.
    TaskEval te = task_gradient(cfg, model, batch, ix, &mvec, dro, true);
    if (cfg.sam) {
      Vector eps = Vector::Zero(static_cast<Eigen::Index>(n_cls));
      eps.head(static_cast<Eigen::Index>(n_ext)) =
          evil_sam_perturbation(te.grad.head(static_cast<Eigen::Index>(n_ext)), mask, cfg.rho);
      model.set_flat(ParamGroup::classifier, theta + eps);
      TaskEval perturbed = task_gradient(cfg, model, batch, ix, &mvec, dro, false);
      model.set_flat(ParamGroup::classifier, theta);
      te.grad = perturbed.grad;
    }
    opt_task.step_masked(theta, te.grad, task_mask);
    model.set_flat(ParamGroup::classifier, theta);

    // Domain learning on theta_var. The task-gradient ablation instead fits
    // the label through the class head, leaving the domain head idle.
    const DomainEval de = domain_gradient(model, batch, cvec);
    Vector ext = model.flat(ParamGroup::extractor);
    if (cfg.recall == RecallCriterion::domain_gradient) {
      opt_var.step_masked(ext, de.extractor_grad, cvec);
      model.set_flat(ParamGroup::extractor, ext);
      Vector head = model.flat(ParamGroup::domain_head);
      opt_dom_head.step(head, de.head_grad);
      model.set_flat(ParamGroup::domain_head, head);
    } else {
      opt_var.step_masked(ext, variant_task_gradient(model, batch, cvec), cvec);
      model.set_flat(ParamGroup::extractor, ext);
    }

    long swapped = 0;
    if (t > cfg.t_pre && t % cfg.delta_T == 0) {
      sharpdro::WorstCaseWeights frozen = dro;
      frozen.frozen = true;
      const TaskEval snap = task_gradient(cfg, model, batch, ix, &mvec, frozen, false);
      GradientSnapshot task{snap.grad.head(static_cast<Eigen::Index>(n_ext)),
                            models::GradientSource::task, t};
      GradientSnapshot dom{cfg.recall == RecallCriterion::domain_gradient
                               ? domain_gradient(model, batch, cvec).extractor_grad
                               : variant_task_gradient(model, batch, cvec),
                           models::GradientSource::domain, t};
      swapped = swap_count(t, sched, mask);
      set_mask(update_mask(mask, task, dom, swapped));
    }

    if (row) {
      row->scalars["task_loss"] = te.ce;
      row->scalars["objective"] = te.objective;
      row->scalars["domain_loss"] = de.loss;
      row->scalars["swapped"] = static_cast<double>(swapped);
      row->scalars["invariant_coverage"] = invariant_coverage(mask, model, envs.m_inv);
      if (cfg.reg == Regularizer::dro) {
        row->vectors["weights"].assign(dro.values.data(), dro.values.data() + dro.values.size());
      }
    }
  }

  if (mask.bits.empty()) set_mask(init_mask_by_magnitude(model.flat(ParamGroup::extractor), cfg.sparsity));
  out.invariant_coverage = invariant_coverage(mask, model, envs.m_inv);
  out.variance = partition_gradient_variance(model, mask, envs);

  const Vector mv = mask.as_vector();
  const Batch all = to_batch(envs);
  for (int e = 0; e < envs.envs; ++e) {
    const Batch b = all.subset(envs.indices_of_env(e));
    // Accuracy of the sparse classifier f_{m∘θ}.
    ad::Tape tape;
    const auto p = model.bind(tape, ParamGroup::classifier, &mv);
    ad::Var logits = model.class_logits(p, model.features(p, tape.constant(b.x)));
    rec.set_summary("acc_env" + std::to_string(e), models::accuracy(logits.value(), b.y));
  }
  rec.set_summary("invariant_coverage", out.invariant_coverage);
  rec.set_summary("grad_var_inv", out.variance.invariant);
  rec.set_summary("grad_var_var", out.variance.variant);
  rec.set_summary("sparsity", mask.sparsity());
  return out;
}

}  // namespace shiftlab::evil
