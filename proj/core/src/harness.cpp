#include "shiftlab/harness.hpp"

#include "shiftlab/dataset_io.hpp"
#include "shiftlab/diagnostics.hpp"
#include "shiftlab/errors.hpp"
#include "shiftlab/evil.hpp"
#include "shiftlab/sharpdro.hpp"
#include "shiftlab/toy_models.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace shiftlab::harness {

namespace fs = std::filesystem;

namespace {

bool is_severity_algorithm(const std::string& a) {
  return sharpdro::algorithm_from_string(a).has_value();
}

bool is_evil(const std::string& a) { return a == "evil" || a == "evil_sam"; }

data::CorruptedDataset concat(const std::vector<data::CorruptedDataset>& parts) {
  data::CorruptedDataset out = parts.front();
  Eigen::Index rows = 0;
  for (const auto& p : parts) rows += p.x.rows();
  out.x.resize(rows, parts.front().x.cols());
  out.y.clear();
  out.severity.clear();
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.x.middleRows(r, p.x.rows()) = p.x;
    r += p.x.rows();
    out.y.insert(out.y.end(), p.y.begin(), p.y.end());
    out.severity.insert(out.severity.end(), p.severity.begin(), p.severity.end());
  }
  return out;
}

models::ModelSpec model_spec(const ExperimentConfig& c) {
  models::ModelSpec s;
  s.kind = models::extractor_kind_from_string(c.model.kind);
  s.hidden = c.model.hidden;
  s.activation = c.model.activation == "relu" ? models::Activation::relu : models::Activation::tanh;
  s.init_scale = c.model.init_scale;
  return s;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

SeverityData make_severity_data(const ExperimentConfig& c) {
  if (!c.data.dir.empty()) {
    const fs::path dir(c.data.dir);
    return {io::load_dataset(dir / "train"), io::load_dataset(dir / "test")};
  }
  const SeedSequence seeds = SeedSequence(c.seed).child(substream::kData);
  const auto kind = data::corruption_kind_from_string(c.data.kind);
  const data::ToyImageSpec img;
  Rng train_rng = seeds.stream("train-source");
  Rng test_rng = seeds.stream("test-source");
  const auto train_src = data::make_toy_images(c.data.n_train, img, train_rng);
  const auto test_src = data::make_toy_images(c.data.n_test_per_severity, img, test_rng);

  data::BuildOptions opt;
  opt.max_severity = c.data.max_severity;
  SeverityData out;
  out.train = data::build_corrupted_dataset(train_src, kind, c.data.lambda, seeds.seed("corrupt"), opt);
  std::vector<data::CorruptedDataset> parts;
  for (int s = 0; s <= c.data.max_severity; ++s) {
    parts.push_back(data::corrupt_at_severity(test_src, kind, s,
                                              seeds.seed("test-corrupt", static_cast<std::uint64_t>(s))));
  }
  out.test = concat(parts);
  out.test.dist = out.train.dist;
  out.test.seed = seeds.seed("test-corrupt");
  return out;
}

data::SyntheticEnvs make_env_data(const ExperimentConfig& c) {
  data::SyntheticEnvSpec spec;
  spec.m_inv = c.data.m_inv;
  spec.m_var = c.data.m_var;
  spec.p = c.data.p;
  spec.n = c.data.n_per_env;
  spec.domain_skew = c.data.domain_skew;
  return data::make_synthetic_envs(spec, SeedSequence(c.seed).seed(substream::kData));
}

ToyPair make_toy_data(const ExperimentConfig& c) {
  const SeedSequence seeds = SeedSequence(c.seed).child(substream::kData);
  const hood::ToySpec spec;
  return {hood::make_toy(c.data.toy_train, spec, seeds.seed("train")),
          hood::make_toy(c.data.toy_test, spec, seeds.seed("test"))};
}

void build_data(const ExperimentConfig& c, const fs::path& out) {
  require_valid(c);
  ExperimentConfig gen = c;
  gen.data.dir.clear();
  const SeverityData d = make_severity_data(gen);
  io::save_dataset(d.train, out / "train");
  io::save_dataset(d.test, out / "test");
}

RunRecord run(const ExperimentConfig& c, const std::optional<fs::path>& out_dir) {
  require_valid(c);
  const auto start = std::chrono::steady_clock::now();
  const std::string config_json = to_json(c);
  RunRecord rec;
  std::optional<models::DualHeadModel> model;
  std::optional<std::vector<unsigned char>> mask;
  std::optional<hood::AugmentedPool> pool;

  if (is_severity_algorithm(c.algorithm)) {
    const SeverityData d = make_severity_data(c);
    sharpdro::TrainConfig t;
    t.algorithm = *sharpdro::algorithm_from_string(c.algorithm);
    t.model = model_spec(c);
    t.lr = c.optimizer.lr;
    t.momentum = c.optimizer.momentum;
    t.weight_decay = c.optimizer.weight_decay;
    t.iterations = c.optimizer.iterations;
    t.batch_size = c.optimizer.batch_size;
    t.rho = c.hyper.rho;
    t.eta = c.hyper.eta;
    t.penalty_weight = c.algorithm == "irm" ? c.hyper.lambda_irm : c.hyper.lambda_rex;
    t.score_smoothing = c.hyper.score_smoothing;
    t.eval_every = c.eval_every;
    t.seed = c.seed;
    auto r = sharpdro::train(t, d.train, d.test);
    rec = std::move(r.record);
    model.emplace(std::move(r.model));
  } else if (is_evil(c.algorithm)) {
    const auto envs = make_env_data(c);
    evil::EvilConfig e;
    e.reg = *evil::regularizer_from_string(c.hyper.reg);
    e.penalty_weight = e.reg == evil::Regularizer::irm ? c.hyper.lambda_irm : c.hyper.lambda_rex;
    e.eta = c.hyper.eta;
    e.sparsity = c.hyper.sparsity;
    e.alpha = c.hyper.alpha;
    e.delta_T = c.hyper.delta_t;
    e.t_pre = c.hyper.t_pre;
    e.iterations = c.optimizer.iterations;
    e.recall = c.hyper.recall == "task" ? evil::RecallCriterion::task_gradient
                                        : evil::RecallCriterion::domain_gradient;
    e.sam = c.algorithm == "evil_sam";
    e.rho = c.hyper.rho;
    e.model = model_spec(c);
    e.lr = c.optimizer.lr;
    e.domain_lr = c.hyper.domain_lr;
    e.momentum = c.optimizer.momentum;
    e.log_every = c.log_every;
    e.seed = c.seed;
    auto r = evil::evil_train(e, envs);
    rec = std::move(r.record);
    mask = r.mask.bits;
    model.emplace(std::move(r.model));
  } else {
    const auto toy = make_toy_data(c);
    hood::HoodConfig h;
    h.aug = *hood::aug_mode_from_string(c.hyper.aug);
    h.augment.epsilon = c.hyper.epsilon;
    h.augment.steps = c.hyper.steps;
    h.iterations = c.optimizer.iterations;
    h.aug_fraction = c.hyper.aug_fraction;
    h.model.latent = c.model.latent;
    h.model.init_scale = c.model.init_scale;
    h.lr = c.optimizer.lr;
    h.momentum = c.optimizer.momentum;
    h.unlabeled_fraction = c.hyper.unlabeled_fraction;
    h.log_every = c.log_every;
    h.seed = c.seed;
    auto r = hood::hood_train(h, toy.train, toy.test);
    rec = std::move(r.record);
    pool = std::move(r.pool);
  }

  rec.algorithm = c.algorithm;
  rec.seed = c.seed;
  rec.config_json = config_json;
  rec.run_id = make_run_id(c.algorithm, c.seed, config_json);
  rec.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (out_dir) {
    fs::create_directories(*out_dir);
    io::write_file_atomic(*out_dir / "config.json", config_json + "\n");
    if (model) models::save_checkpoint(*out_dir / "ckpt", *model, mask);
    if (pool) hood::save_pool(*pool, *out_dir / "pool");
    save_run_record(rec, *out_dir);
    spdlog::info("run {} written to {}", rec.run_id, out_dir->string());
  }
  return rec;
}

std::optional<DiagnosticKind> diagnostic_from_string(const std::string& name) {
  if (name == "sharpness") return DiagnosticKind::sharpness;
  if (name == "gradnorm") return DiagnosticKind::gradnorm;
  if (name == "gradvar") return DiagnosticKind::gradvar;
  if (name == "hessian") return DiagnosticKind::hessian;
  return std::nullopt;
}

std::string diagnose(DiagnosticKind kind, const fs::path& ckpt,
                     const std::optional<fs::path>& data_dir, double rho) {
  auto cp = models::load_checkpoint(ckpt);
  ExperimentConfig cfg;
  const fs::path cfg_file = ckpt.parent_path() / "config.json";
  if (fs::exists(cfg_file)) cfg = parse_config(read_text(cfg_file));
  if (data_dir) cfg.data.dir = data_dir->string();
  const bool env_model = is_evil(cfg.algorithm);

  switch (kind) {
    case DiagnosticKind::sharpness:
    case DiagnosticKind::gradnorm: {
      if (env_model) throw DomainError("per-severity diagnostics need a severity-task checkpoint");
      const auto d = make_severity_data(cfg);
      if (kind == DiagnosticKind::sharpness) {
        return diagnostics::to_csv(diagnostics::sharpness_by_severity(cp.model, d.test, rho), "sharpness");
      }
      return diagnostics::to_csv(diagnostics::grad_norm_by_severity(cp.model, d.test), "grad_norm");
    }
    case DiagnosticKind::gradvar: {
      if (!env_model || !cp.mask) throw DomainError("gradvar needs a masked environment checkpoint");
      const auto envs = make_env_data(cfg);
      evil::ParameterMask m{*cp.mask};
      const auto v = evil::partition_gradient_variance(cp.model, m, envs);
      char buf[128];
      std::snprintf(buf, sizeof buf, "partition,variance\ninvariant,%.17g\nvariant,%.17g\n",
                    v.invariant, v.variant);
      return buf;
    }
    case DiagnosticKind::hessian: {
      models::Batch batch;
      if (env_model) {
        batch = evil::to_batch(make_env_data(cfg));
      } else {
        batch = sharpdro::to_batch(make_severity_data(cfg).test);
      }
      const auto loss = sharpdro::mean_cross_entropy();
      auto report = diagnostics::hessian_lanczos(cp.model, loss, batch, 5);
      std::string out = diagnostics::to_csv(report);
      if (static_cast<Eigen::Index>(cp.model.count(models::ParamGroup::classifier)) <= diagnostics::kDenseLimit) {
        const auto dense = diagnostics::hessian_dense(cp.model, loss, batch, 5);
        const std::string d = diagnostics::to_csv(dense);
        out += d.substr(d.find('\n') + 1);
      }
      return out;
    }
  }
  return {};
}

std::string CompareReport::csv() const {
  std::string out = "algorithm,group,mean,std,runs\n";
  char buf[128];
  for (const auto& r : rows) {
    for (std::size_t g = 0; g < groups.size(); ++g) {
      std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%zu\n", r.mean[g], r.stddev[g], r.runs);
      out += r.algorithm + "," + groups[g] + buf;
    }
  }
  return out;
}

std::string CompareReport::text() const {
  std::string out = metric;
  out.resize(std::max<std::size_t>(out.size(), 20), ' ');
  char buf[64];
  for (const auto& g : groups) {
    std::snprintf(buf, sizeof buf, " %17s", g.c_str());
    out += buf;
  }
  out += "\n";
  for (const auto& r : rows) {
    std::string line = r.algorithm;
    line.resize(std::max<std::size_t>(line.size(), 20), ' ');
    for (std::size_t g = 0; g < groups.size(); ++g) {
      std::snprintf(buf, sizeof buf, " %8.4f ± %6.4f", r.mean[g], r.stddev[g]);
      line += buf;
    }
    out += line + "\n";
  }
  return out;
}

CompareReport compare(const std::vector<RunRecord>& records, const std::string& metric,
                      const std::string& group_by) {
  if (records.size() < 2) throw DomainError("compare: need at least two records");
  std::string prefix;
  if (group_by == "severity") {
    prefix = metric + "_s";
  } else if (group_by == "env") {
    prefix = metric + "_env";
  } else if (group_by != "none") {
    throw DomainError("compare: group_by must be severity, env or none");
  }

  CompareReport rep;
  rep.metric = metric;
  std::vector<std::string> keys;
  if (group_by == "none") {
    for (const auto& r : records) {
      if (r.summary_value(metric)) {
        keys.push_back(metric);
        rep.groups.push_back(metric);
        break;
      }
    }
  } else {
    for (int k = 0;; ++k) {
      const std::string key = prefix + std::to_string(k);
      bool any = false;
      for (const auto& r : records) any = any || r.summary_value(key).has_value();
      if (!any) break;
      keys.push_back(key);
      rep.groups.push_back((group_by == "severity" ? "s" : "env") + std::to_string(k));
    }
  }
  if (keys.empty()) {
    std::map<std::string, int> available;
    for (const auto& r : records) {
      for (const auto& [k, v] : r.summary) available[k] = 1;
    }
    std::string list;
    for (const auto& [k, v] : available) list += (list.empty() ? "" : ", ") + k;
    throw DomainError("compare: metric '" + metric + "' not found; available: " + list);
  }

  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunRecord*>> by_algo;
  for (const auto& r : records) {
    const bool has = std::any_of(keys.begin(), keys.end(),
                                 [&](const std::string& k) { return r.summary_value(k).has_value(); });
    if (!has) continue;
    if (!by_algo.count(r.algorithm)) order.push_back(r.algorithm);
    by_algo[r.algorithm].push_back(&r);
  }
  for (const auto& algo : order) {
    CompareRow row;
    row.algorithm = algo;
    const auto& rs = by_algo[algo];
    row.runs = rs.size();
    for (const auto& key : keys) {
      std::vector<double> v;
      for (const auto* r : rs) {
        if (auto x = r->summary_value(key)) v.push_back(*x);
      }
      double mean = 0.0;
      for (double x : v) mean += x;
      mean = v.empty() ? 0.0 : mean / static_cast<double>(v.size());
      double ss = 0.0;
      for (double x : v) ss += (x - mean) * (x - mean);
      row.mean.push_back(mean);
      row.stddev.push_back(v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0);
    }
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

}  // namespace shiftlab::harness
