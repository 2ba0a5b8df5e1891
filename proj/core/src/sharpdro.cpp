#include "shiftlab/sharpdro.hpp"

#include "shiftlab/errors.hpp"
#include "shiftlab/evil.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>

namespace shiftlab::sharpdro {

using models::ParamGroup;
using Matrix = Eigen::MatrixXd;

namespace {

constexpr ParamGroup kGroup = ParamGroup::classifier;

// One bound forward pass of the class path, kept alive so the caller can
// choose the weighting before running backward.
struct Pass {
  ad::Tape tape;
  DualHeadModel::Bound params;
  ad::Var logits;
  ad::Var ce;

  Pass(const DualHeadModel& model, const Batch& batch) {
    params = model.bind(tape, kGroup);
    ad::Var x = tape.constant(batch.x);
    logits = model.class_logits(params, model.features(params, x));
    ce = ad::cross_entropy(logits, batch.y);
  }

  Vector losses() const { return ce.value().col(0); }

  double backward_weighted(const DualHeadModel& model, const Vector& w, Vector& grad) {
    ad::Var loss = ad::weighted_sum(ce, w);
    tape.backward(loss);
    grad = model.gather_grad(params, kGroup);
    return loss.scalar();
  }
};

Vector max_confidence(const Matrix& logits) {
  return ad::softmax_rows(logits).rowwise().maxCoeff();
}

void check_batch(const Batch& batch) {
  if (batch.size() == 0) throw DomainError("empty batch");
}

void check_groups(const Batch& batch, int groups) {
  if (batch.group.size() != batch.size()) {
    throw ConfigError({"aware mode requires a group (severity) index for every example"});
  }
  for (int g : batch.group) {
    if (g < 0 || g >= groups) {
      throw DomainError("group index " + std::to_string(g) + " outside [0, " +
                        std::to_string(groups) + ")");
    }
  }
}

}  // namespace

std::string to_string(WeightMode mode) { return mode == WeightMode::aware ? "aware" : "agnostic"; }

WorstCaseWeights WorstCaseWeights::uniform_groups(int groups, double eta) {
  if (groups < 1) throw DomainError("uniform_groups: need at least one group");
  WorstCaseWeights w;
  w.mode = WeightMode::aware;
  w.values = Vector::Constant(groups, 1.0 / groups);
  w.eta = eta;
  return w;
}

WorstCaseWeights WorstCaseWeights::uniform_examples(std::size_t n, bool frozen) {
  WorstCaseWeights w;
  w.mode = WeightMode::agnostic;
  w.values = Vector::Ones(static_cast<Eigen::Index>(n));
  w.frozen = frozen;
  return w;
}

Vector WorstCaseWeights::example_weights(const Batch& batch) const {
  const auto n = static_cast<Eigen::Index>(batch.size());
  if (mode == WeightMode::agnostic) {
    if (values.size() != n) throw DomainError("agnostic weights must have one value per example");
    return values / static_cast<double>(n);
  }
  const int groups = static_cast<int>(values.size());
  check_groups(batch, groups);
  std::vector<double> counts(static_cast<std::size_t>(groups), 0.0);
  for (int g : batch.group) counts[static_cast<std::size_t>(g)] += 1.0;
  Vector out(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto g = static_cast<std::size_t>(batch.group[static_cast<std::size_t>(i)]);
    out(i) = values(static_cast<Eigen::Index>(g)) / counts[g];
  }
  return out;
}

Vector sam_perturbation(const Vector& grad, double rho) {
  if (grad.hasNaN()) throw NumericError("sam_perturbation: NaN in gradient");
  Vector eps(grad.size());
  for (Eigen::Index i = 0; i < grad.size(); ++i) {
    const double g = grad(i);
    eps(i) = g > 0 ? rho : (g < 0 ? -rho : 0.0);
  }
  return eps;
}

LossFn mean_cross_entropy() {
  return [](const DualHeadModel& m, const Batch& b, Vector* grad) {
    return models::mean_class_loss(m, b, grad, kGroup);
  };
}

double sharpness(const LossFn& loss_fn, DualHeadModel& model, const Batch& batch, double rho) {
  const Vector theta = model.flat(kGroup);
  Vector grad;
  const double base = loss_fn(model, batch, &grad);
  model.set_flat(kGroup, theta + sam_perturbation(grad, rho));
  double perturbed = 0.0;
  try {
    perturbed = loss_fn(model, batch, nullptr);
  } catch (...) {
    model.set_flat(kGroup, theta);
    throw;
  }
  model.set_flat(kGroup, theta);
  return perturbed - base;
}

Vector ood_score(DualHeadModel& model, const Batch& batch, double rho) {
  if (batch.size() == 0) throw DomainError("ood_score: empty batch");
  const Vector theta = model.flat(kGroup);
  Vector grad;
  models::mean_class_loss(model, batch, &grad, kGroup);
  const Vector before = max_confidence(model.forward_class(batch.x));
  model.set_flat(kGroup, theta + sam_perturbation(grad, rho));
  const Vector after = max_confidence(model.forward_class(batch.x));
  model.set_flat(kGroup, theta);
  return before - after;
}

Vector normalize_scores(const Vector& scores) {
  if (scores.size() == 0) return scores;
  const double m = scores.mean();
  if (!(m > 0.0) || !std::isfinite(m)) {
    spdlog::debug("normalize_scores: non-positive mean score, using uniform weights");
    return Vector::Ones(scores.size());
  }
  return scores / m;
}

WorstCaseWeights update_group_weights(const WorstCaseWeights& w, const Vector& per_group_losses,
                                      double eta) {
  if (w.mode != WeightMode::aware) throw DomainError("update_group_weights: aware mode only");
  if (per_group_losses.size() != w.values.size()) {
    throw DomainError("update_group_weights: one loss per group required");
  }
  if (!per_group_losses.allFinite()) throw NumericError("update_group_weights: non-finite loss");
  // Log-space update; subtracting the max keeps exp() in range.
  Vector logw(w.values.size());
  for (Eigen::Index s = 0; s < logw.size(); ++s) {
    logw(s) = w.values(s) > 0 ? std::log(w.values(s)) + eta * per_group_losses(s)
                              : -std::numeric_limits<double>::infinity();
  }
  const double top = logw.maxCoeff();
  WorstCaseWeights out = w;
  out.values = (logw.array() - top).exp().matrix();
  out.values /= out.values.sum();
  if (std::abs(out.values.sum() - 1.0) > 1e-9 || (out.values.array() < 0).any()) {
    throw InvariantError("update_group_weights: weights left the simplex");
  }
  return out;
}

Vector group_mean_losses(const Vector& per_example, const std::vector<int>& group, int groups) {
  Vector sum = Vector::Zero(groups);
  Vector cnt = Vector::Zero(groups);
  for (std::size_t i = 0; i < group.size(); ++i) {
    sum(group[i]) += per_example(static_cast<Eigen::Index>(i));
    cnt(group[i]) += 1.0;
  }
  for (int s = 0; s < groups; ++s) {
    if (cnt(s) > 0) sum(s) /= cnt(s);
  }
  return sum;
}

StepMetrics sharpdro_step(DualHeadModel& model, const Batch& batch, WorstCaseWeights& w,
                          const StepConfig& cfg, optim::Sgd& opt, ScoreMemory* memory) {
  check_batch(batch);
  const auto n = static_cast<Eigen::Index>(batch.size());
  const bool aware = w.mode == WeightMode::aware;
  if (aware) check_groups(batch, static_cast<int>(w.values.size()));
  StepMetrics m;

  Vector theta = model.flat(kGroup);
  Pass first(model, batch);
  ++m.forward_passes;
  const Vector l0 = first.losses();
  m.mean_loss = l0.mean();

  Vector weights;
  if (aware) {
    m.group_losses = group_mean_losses(l0, batch.group, static_cast<int>(w.values.size()));
    if (!w.frozen) w = update_group_weights(w, m.group_losses, w.eta);
    weights = w.example_weights(batch);
  } else {
    // Agnostic weights depend on the perturbation itself, so the inner max
    // uses the unweighted loss.
    weights = Vector::Constant(n, 1.0 / static_cast<double>(n));
  }
  Vector g1;
  const double first_loss = first.backward_weighted(model, weights, g1);
  ++m.backward_passes;

  model.set_flat(kGroup, theta + sam_perturbation(g1, cfg.rho));
  Pass second(model, batch);
  ++m.forward_passes;

  if (!aware) {
    if (!w.frozen) {
      Vector scores = max_confidence(first.logits.value()) - max_confidence(second.logits.value());
      if (cfg.clamp_negative_scores) scores = scores.cwiseMax(0.0);
      if (cfg.score_smoothing > 0.0 && memory && batch.index.size() == batch.size()) {
        const double beta = cfg.score_smoothing;
        for (Eigen::Index i = 0; i < n; ++i) {
          const std::size_t r = batch.index[static_cast<std::size_t>(i)];
          if (r >= memory->seen.size()) {
            memory->seen.resize(r + 1, 0);
            memory->scores.conservativeResize(static_cast<Eigen::Index>(r + 1));
          }
          const auto ri = static_cast<Eigen::Index>(r);
          if (memory->seen[r]) scores(i) = beta * memory->scores(ri) + (1.0 - beta) * scores(i);
          memory->scores(ri) = scores(i);
          memory->seen[r] = 1;
        }
      }
      w.values = normalize_scores(scores);
    }
    weights = w.example_weights(batch);
  }

  Vector g2;
  m.perturbed_loss = second.backward_weighted(model, weights, g2);
  ++m.backward_passes;
  m.weighted_loss = aware ? first_loss : weights.dot(l0);
  m.sharpness = m.perturbed_loss - m.weighted_loss;

  // grad (L_w + R_w) = grad L_w(theta + eps*), the perturbed-point gradient.
  m.grad_norm = g2.norm();
  opt.step(theta, g2);
  model.set_flat(kGroup, theta);
  return m;
}

StepMetrics groupdro_step(DualHeadModel& model, const Batch& batch, WorstCaseWeights& w,
                          optim::Sgd& opt) {
  check_batch(batch);
  if (w.mode != WeightMode::aware) throw DomainError("groupdro_step: aware weights required");
  check_groups(batch, static_cast<int>(w.values.size()));
  StepMetrics m;
  Vector theta = model.flat(kGroup);
  Pass pass(model, batch);
  ++m.forward_passes;
  const Vector l0 = pass.losses();
  m.mean_loss = l0.mean();
  m.group_losses = group_mean_losses(l0, batch.group, static_cast<int>(w.values.size()));
  if (!w.frozen) w = update_group_weights(w, m.group_losses, w.eta);
  Vector g;
  m.weighted_loss = pass.backward_weighted(model, w.example_weights(batch), g);
  m.perturbed_loss = m.weighted_loss;
  ++m.backward_passes;
  m.grad_norm = g.norm();
  opt.step(theta, g);
  model.set_flat(kGroup, theta);
  return m;
}

StepMetrics erm_step(DualHeadModel& model, const Batch& batch, optim::Sgd& opt) {
  check_batch(batch);
  StepMetrics m;
  Vector theta = model.flat(kGroup);
  Vector g;
  m.weighted_loss = models::mean_class_loss(model, batch, &g, kGroup);
  m.mean_loss = m.weighted_loss;
  m.perturbed_loss = m.weighted_loss;
  m.forward_passes = 1;
  m.backward_passes = 1;
  m.grad_norm = g.norm();
  opt.step(theta, g);
  model.set_flat(kGroup, theta);
  return m;
}

namespace {

// ERM plus an IRM or REx penalty over the groups present in the batch.
StepMetrics penalty_step(DualHeadModel& model, const Batch& batch, Algorithm algo, double lambda,
                         int groups, optim::Sgd& opt) {
  check_batch(batch);
  check_groups(batch, groups);
  StepMetrics m;
  const auto n = static_cast<Eigen::Index>(batch.size());
  Vector theta = model.flat(kGroup);
  Pass pass(model, batch);
  m.forward_passes = 1;
  const Vector l0 = pass.losses();
  m.mean_loss = l0.mean();
  m.group_losses = group_mean_losses(l0, batch.group, groups);

  ad::Var risk = ad::weighted_sum(pass.ce, Vector::Constant(n, 1.0 / static_cast<double>(n)));
  ad::Var penalty;
  if (algo == Algorithm::irm) {
    penalty = evil::irm_penalty(pass.logits, batch.y);
  } else {
    std::vector<ad::Var> env_losses;
    Vector counts = Vector::Zero(groups);
    for (int g : batch.group) counts(g) += 1.0;
    for (int s = 0; s < groups; ++s) {
      if (counts(s) == 0) continue;
      Vector ind = Vector::Zero(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        if (batch.group[static_cast<std::size_t>(i)] == s) ind(i) = 1.0 / counts(s);
      }
      env_losses.push_back(ad::weighted_sum(pass.ce, ind));
    }
    if (env_losses.size() < 2) {
      penalty = pass.tape.constant(Matrix::Zero(1, 1));
    } else {
      penalty = evil::rex_penalty(env_losses);
    }
  }
  ad::Var total = ad::add(risk, ad::scale(penalty, lambda));
  pass.tape.backward(total);
  m.backward_passes = 1;
  Vector g = model.gather_grad(pass.params, kGroup);
  m.weighted_loss = total.scalar();
  m.perturbed_loss = m.weighted_loss;
  m.grad_norm = g.norm();
  opt.step(theta, g);
  model.set_flat(kGroup, theta);
  return m;
}

}  // namespace

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::erm: return "erm";
    case Algorithm::groupdro: return "groupdro";
    case Algorithm::irm: return "irm";
    case Algorithm::rex: return "rex";
    case Algorithm::sharpdro_aware: return "sharpdro_aware";
    case Algorithm::sharpdro_agnostic: return "sharpdro_agnostic";
  }
  return "unknown";
}

std::optional<Algorithm> algorithm_from_string(const std::string& name) {
  for (auto a : {Algorithm::erm, Algorithm::groupdro, Algorithm::irm, Algorithm::rex,
                 Algorithm::sharpdro_aware, Algorithm::sharpdro_agnostic}) {
    if (to_string(a) == name) return a;
  }
  return std::nullopt;
}

Matrix model_input(const Matrix& pixels) { return pixels.array() - 0.5; }

Batch to_batch(const data::CorruptedDataset& ds) {
  Batch b;
  b.x = model_input(ds.x);
  b.y = ds.y;
  b.group = ds.severity;
  b.index.resize(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) b.index[i] = i;
  return b;
}

Evaluation evaluate_by_severity(const DualHeadModel& model, const data::CorruptedDataset& test,
                                int max_severity) {
  Evaluation ev;
  ev.accuracy_by_severity.assign(static_cast<std::size_t>(max_severity + 1), 0.0);
  ev.loss_by_severity.assign(static_cast<std::size_t>(max_severity + 1), 0.0);
  const Matrix logits = model.forward_class(model_input(test.x));
  const auto pred = models::argmax_rows(logits);
  const Vector ce = ad::cross_entropy_rows(logits, test.y);
  std::vector<double> count(ev.accuracy_by_severity.size(), 0.0);
  for (std::size_t i = 0; i < test.size(); ++i) {
    const int s = test.severity[i];
    if (s < 0 || s > max_severity) throw DomainError("evaluate_by_severity: severity out of range");
    const auto k = static_cast<std::size_t>(s);
    count[k] += 1.0;
    ev.accuracy_by_severity[k] += pred[i] == test.y[i] ? 1.0 : 0.0;
    ev.loss_by_severity[k] += ce(static_cast<Eigen::Index>(i));
  }
  ev.worst_accuracy = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < count.size(); ++k) {
    if (count[k] == 0) continue;
    ev.accuracy_by_severity[k] /= count[k];
    ev.loss_by_severity[k] /= count[k];
    if (ev.accuracy_by_severity[k] < ev.worst_accuracy) {
      ev.worst_accuracy = ev.accuracy_by_severity[k];
      ev.worst_severity = static_cast<int>(k);
    }
  }
  if (!std::isfinite(ev.worst_accuracy)) ev.worst_accuracy = 0.0;
  return ev;
}

TrainResult train(const TrainConfig& cfg, const data::CorruptedDataset& train_set,
                  const data::CorruptedDataset& test) {
  if (train_set.size() == 0) throw DomainError("train: empty training set");
  if (cfg.iterations < 1) throw ConfigError({"iterations must be >= 1"});
  const SeedSequence seeds(cfg.seed);
  Rng init = seeds.stream(substream::kInit);
  Rng sampler = seeds.stream(substream::kTrain);

  models::ModelSpec spec = cfg.model;
  spec.input_dim = static_cast<int>(train_set.x.cols());
  spec.classes = train_set.classes;
  TrainResult out{DualHeadModel(spec, init), RunRecord{}, Evaluation{}, WorstCaseWeights{}};
  DualHeadModel& model = out.model;

  const int max_s = train_set.dist.max_severity;
  const int groups = max_s + 1;
  const Batch full = to_batch(train_set);
  const std::size_t n = full.size();
  const bool minibatch = cfg.batch_size > 0 && cfg.batch_size < n;
  const std::size_t bs = minibatch ? cfg.batch_size : n;

  optim::Sgd opt(cfg.lr, cfg.momentum, cfg.weight_decay);
  WorstCaseWeights& w = out.weights;
  if (cfg.algorithm == Algorithm::sharpdro_agnostic) {
    w = WorstCaseWeights::uniform_examples(bs, false);
  } else {
    w = WorstCaseWeights::uniform_groups(groups, cfg.eta);
  }
  StepConfig step_cfg;
  step_cfg.rho = cfg.rho;
  step_cfg.score_smoothing = cfg.score_smoothing;
  ScoreMemory memory;

  RunRecord& rec = out.record;
  rec.algorithm = to_string(cfg.algorithm);
  rec.seed = cfg.seed;

  std::vector<std::size_t> rows(bs);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  for (long t = 1; t <= cfg.iterations; ++t) {
    Batch sampled;
    if (minibatch) {
      for (auto& r : rows) r = pick(sampler);
      sampled = full.subset(rows);
    }
    const Batch& batch = minibatch ? sampled : full;

    StepMetrics m;
    switch (cfg.algorithm) {
      case Algorithm::erm: m = erm_step(model, batch, opt); break;
      case Algorithm::groupdro: m = groupdro_step(model, batch, w, opt); break;
      case Algorithm::irm:
      case Algorithm::rex:
        m = penalty_step(model, batch, cfg.algorithm, cfg.penalty_weight, groups, opt);
        break;
      case Algorithm::sharpdro_aware:
      case Algorithm::sharpdro_agnostic:
        m = sharpdro_step(model, batch, w, step_cfg, opt, &memory);
        break;
    }
    if (!std::isfinite(m.weighted_loss)) {
      throw NumericError("train: non-finite loss at iteration " + std::to_string(t));
    }

    MetricRow& row = rec.add_row(t);
    row.scalars["loss"] = m.mean_loss;
    row.scalars["weighted_loss"] = m.weighted_loss;
    row.scalars["perturbed_loss"] = m.perturbed_loss;
    row.scalars["sharpness"] = m.sharpness;
    row.scalars["grad_norm"] = m.grad_norm;
    if (m.group_losses.size() > 0) {
      row.vectors["group_loss"].assign(m.group_losses.data(),
                                       m.group_losses.data() + m.group_losses.size());
    }
    if (w.mode == WeightMode::aware && cfg.algorithm != Algorithm::erm) {
      row.vectors["weights"].assign(w.values.data(), w.values.data() + w.values.size());
    } else if (w.mode == WeightMode::agnostic) {
      row.scalars["weight_min"] = w.values.minCoeff();
      row.scalars["weight_max"] = w.values.maxCoeff();
    }
    if ((cfg.eval_every > 0 && t % cfg.eval_every == 0) || t == cfg.iterations) {
      if (test.size() > 0) {
        const Evaluation ev = evaluate_by_severity(model, test, max_s);
        row.vectors["test_acc"] = ev.accuracy_by_severity;
        row.scalars["worst_acc"] = ev.worst_accuracy;
      }
    }
  }

  if (test.size() > 0) out.final_eval = evaluate_by_severity(model, test, max_s);
  for (int s = 0; s <= max_s; ++s) {
    const auto k = static_cast<std::size_t>(s);
    rec.set_summary("acc_s" + std::to_string(s),
                    k < out.final_eval.accuracy_by_severity.size()
                        ? out.final_eval.accuracy_by_severity[k]
                        : 0.0);
  }
  rec.set_summary("worst_acc", out.final_eval.worst_accuracy);
  return out;
}

}  // namespace shiftlab::sharpdro
