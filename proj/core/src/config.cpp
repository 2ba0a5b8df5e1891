#include "shiftlab/config.hpp"

#include "shiftlab/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <type_traits>

namespace shiftlab {

using nlohmann::json;

namespace {

// Every serialized field with its dotted path. Shared by reading, writing
// and unknown-key detection.
template <typename Config, typename F>
void visit(Config& c, F&& f) {
  f("algorithm", c.algorithm);
  f("seed", c.seed);
  f("eval_every", c.eval_every);
  f("log_every", c.log_every);

  f("data.kind", c.data.kind);
  f("data.lambda", c.data.lambda);
  f("data.max_severity", c.data.max_severity);
  f("data.n_train", c.data.n_train);
  f("data.n_test_per_severity", c.data.n_test_per_severity);
  f("data.dir", c.data.dir);
  f("data.m_inv", c.data.m_inv);
  f("data.m_var", c.data.m_var);
  f("data.p", c.data.p);
  f("data.n_per_env", c.data.n_per_env);
  f("data.domain_skew", c.data.domain_skew);
  f("data.toy_train", c.data.toy_train);
  f("data.toy_test", c.data.toy_test);

  f("model.kind", c.model.kind);
  f("model.hidden", c.model.hidden);
  f("model.activation", c.model.activation);
  f("model.init_scale", c.model.init_scale);
  f("model.latent", c.model.latent);

  f("optimizer.lr", c.optimizer.lr);
  f("optimizer.momentum", c.optimizer.momentum);
  f("optimizer.weight_decay", c.optimizer.weight_decay);
  f("optimizer.iterations", c.optimizer.iterations);
  f("optimizer.batch_size", c.optimizer.batch_size);

  f("hyper.rho", c.hyper.rho);
  f("hyper.eta", c.hyper.eta);
  f("hyper.lambda_irm", c.hyper.lambda_irm);
  f("hyper.lambda_rex", c.hyper.lambda_rex);
  f("hyper.score_smoothing", c.hyper.score_smoothing);
  f("hyper.reg", c.hyper.reg);
  f("hyper.sparsity", c.hyper.sparsity);
  f("hyper.alpha", c.hyper.alpha);
  f("hyper.delta_t", c.hyper.delta_t);
  f("hyper.t_pre", c.hyper.t_pre);
  f("hyper.recall", c.hyper.recall);
  f("hyper.domain_lr", c.hyper.domain_lr);
  f("hyper.epsilon", c.hyper.epsilon);
  f("hyper.steps", c.hyper.steps);
  f("hyper.aug", c.hyper.aug);
  f("hyper.aug_fraction", c.hyper.aug_fraction);
  f("hyper.unlabeled_fraction", c.hyper.unlabeled_fraction);
}

json::json_pointer pointer(const std::string& dotted) {
  std::string p = "/" + dotted;
  std::replace(p.begin(), p.end(), '.', '/');
  return json::json_pointer(p);
}

template <typename T>
std::optional<std::string> read_field(const json& j, T& out) {
  if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) return "expected a string";
    out = j.get<std::string>();
  } else if constexpr (std::is_same_v<T, double>) {
    if (!j.is_number()) return "expected a number";
    out = j.get<double>();
  } else if constexpr (std::is_same_v<T, std::vector<double>>) {
    if (!j.is_array()) return "expected an array of numbers";
    std::vector<double> v;
    for (const auto& e : j) {
      if (!e.is_number()) return "expected an array of numbers";
      v.push_back(e.get<double>());
    }
    out = std::move(v);
  } else if constexpr (std::is_unsigned_v<T>) {
    if (!j.is_number_integer() || (j.is_number_integer() && !j.is_number_unsigned() && j.get<long long>() < 0)) {
      return "expected a non-negative integer";
    }
    out = j.get<T>();
  } else {
    static_assert(std::is_integral_v<T>);
    if (!j.is_number_integer()) return "expected an integer";
    out = j.get<T>();
  }
  return std::nullopt;
}

void collect_paths(const json& j, const std::string& prefix, std::vector<std::string>& out) {
  for (const auto& [k, v] : j.items()) {
    const std::string path = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) {
      collect_paths(v, path, out);
    } else {
      out.push_back(path);
    }
  }
}

bool one_of(const std::string& v, std::initializer_list<const char*> names) {
  return std::any_of(names.begin(), names.end(), [&](const char* n) { return v == n; });
}

}  // namespace

ExperimentConfig defaults_for(const std::string& algorithm) {
  ExperimentConfig c;
  c.algorithm = algorithm;
  if (algorithm == "evil" || algorithm == "evil_sam") {
    c.model.kind = "linear";
    c.model.hidden = 1;
    c.hyper.delta_t = 50;
    c.optimizer.lr = 0.1;
    c.optimizer.iterations = 3000;
    c.eval_every = 0;
  } else if (algorithm == "sharpdro_aware" || algorithm == "sharpdro_agnostic") {
    c.hyper.rho = 0.01;
  } else if (algorithm == "hood") {
    c.optimizer.lr = 0.05;
    c.optimizer.momentum = 0.9;
    c.optimizer.iterations = 1500;
    c.eval_every = 0;
  }
  return c;
}

std::vector<std::string> validate(const ExperimentConfig& c) {
  std::vector<std::string> p;
  const auto& algos = known_algorithms();
  if (std::find(algos.begin(), algos.end(), c.algorithm) == algos.end()) {
    p.push_back("algorithm: unknown algorithm '" + c.algorithm + "'");
  }
  if (c.eval_every < 0) p.push_back("eval_every: must be >= 0");
  if (c.log_every < 0) p.push_back("log_every: must be >= 0");

  const auto& d = c.data;
  if (!one_of(d.kind, {"gaussian", "shot"})) p.push_back("data.kind: expected gaussian or shot");
  if (!(d.lambda > 0)) p.push_back("data.lambda: must be positive");
  if (d.max_severity < 0 || d.max_severity > 5) p.push_back("data.max_severity: must lie in [0, 5]");
  if (d.n_train < 1) p.push_back("data.n_train: must be >= 1");
  if (d.n_test_per_severity < 1) p.push_back("data.n_test_per_severity: must be >= 1");
  if (d.m_inv < 1) p.push_back("data.m_inv: must be >= 1");
  if (d.m_var < 1) p.push_back("data.m_var: must be >= 1");
  if (d.p.size() < 2) p.push_back("data.p: need at least two environments");
  for (double v : d.p) {
    if (!(v > 0 && v < 1)) {
      p.push_back("data.p: every entry must lie in (0, 1)");
      break;
    }
  }
  if (d.n_per_env < 1) p.push_back("data.n_per_env: must be >= 1");
  if (!(d.domain_skew >= 0 && d.domain_skew <= 1)) p.push_back("data.domain_skew: must lie in [0, 1]");
  if (d.toy_train < 1) p.push_back("data.toy_train: must be >= 1");
  if (d.toy_test < 1) p.push_back("data.toy_test: must be >= 1");

  const auto& m = c.model;
  if (!one_of(m.kind, {"linear", "mlp"})) p.push_back("model.kind: expected linear or mlp");
  if (m.hidden < 1) p.push_back("model.hidden: must be >= 1");
  if (!one_of(m.activation, {"tanh", "relu"})) p.push_back("model.activation: expected tanh or relu");
  if (!(m.init_scale > 0)) p.push_back("model.init_scale: must be positive");
  if (m.latent < 1) p.push_back("model.latent: must be >= 1");

  const auto& o = c.optimizer;
  if (!(o.lr > 0)) p.push_back("optimizer.lr: must be positive");
  if (!(o.momentum >= 0 && o.momentum < 1)) p.push_back("optimizer.momentum: must lie in [0, 1)");
  if (!(o.weight_decay >= 0)) p.push_back("optimizer.weight_decay: must be >= 0");
  if (o.iterations < 1) p.push_back("optimizer.iterations: must be >= 1");

  const auto& h = c.hyper;
  if (!(h.rho >= 0)) p.push_back("hyper.rho: must be >= 0");
  if (!(h.eta >= 0)) p.push_back("hyper.eta: must be >= 0");
  if (!(h.lambda_irm >= 0)) p.push_back("hyper.lambda_irm: must be >= 0");
  if (!(h.lambda_rex >= 0)) p.push_back("hyper.lambda_rex: must be >= 0");
  if (!(h.score_smoothing >= 0 && h.score_smoothing < 1)) {
    p.push_back("hyper.score_smoothing: must lie in [0, 1)");
  }
  if (!one_of(h.reg, {"erm", "irm", "rex", "dro"})) p.push_back("hyper.reg: expected erm, irm, rex or dro");
  if (!(h.sparsity > 0 && h.sparsity < 1)) p.push_back("hyper.sparsity: must lie in (0, 1)");
  if (!(h.alpha > 0 && h.alpha < 1)) p.push_back("hyper.alpha: must lie in (0, 1)");
  if (h.delta_t < 1) p.push_back("hyper.delta_t: must be >= 1");
  if (h.t_pre < 0) p.push_back("hyper.t_pre: must be >= 0");
  if ((c.algorithm == "evil" || c.algorithm == "evil_sam") && h.t_pre >= o.iterations) {
    p.push_back("hyper.t_pre: must be below optimizer.iterations");
  }
  if (!one_of(h.recall, {"domain", "task"})) p.push_back("hyper.recall: expected domain or task");
  if (!(h.domain_lr > 0)) p.push_back("hyper.domain_lr: must be positive");
  if (!(h.epsilon > 0)) p.push_back("hyper.epsilon: must be positive");
  if (h.steps < 0) p.push_back("hyper.steps: must be >= 0");
  if (!one_of(h.aug, {"both", "pos", "neg", "none"})) p.push_back("hyper.aug: expected both, pos, neg or none");
  if (!(h.aug_fraction >= 0 && h.aug_fraction <= 1)) p.push_back("hyper.aug_fraction: must lie in [0, 1]");
  if (!(h.unlabeled_fraction >= 0 && h.unlabeled_fraction < 1)) {
    p.push_back("hyper.unlabeled_fraction: must lie in [0, 1)");
  }
  return p;
}

void require_valid(const ExperimentConfig& config) {
  auto problems = validate(config);
  if (!problems.empty()) throw ConfigError(std::move(problems));
}

std::string to_json(const ExperimentConfig& config) {
  json j = json::object();
  visit(config, [&](const char* path, const auto& v) { j[pointer(path)] = v; });
  return j.dump();
}

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError({std::string("config is not valid JSON: ") + e.what()});
  }
  if (!j.is_object()) throw ConfigError({"config must be a JSON object"});

  std::vector<std::string> problems;
  std::string algorithm = "sharpdro_aware";
  if (j.contains("algorithm")) {
    if (j["algorithm"].is_string()) {
      algorithm = j["algorithm"].get<std::string>();
    }
  }
  ExperimentConfig c = defaults_for(algorithm);

  std::set<std::string> known;
  visit(c, [&](const char* path, auto& v) {
    known.insert(path);
    const auto ptr = pointer(path);
    if (!j.contains(ptr)) return;
    if (auto err = read_field(j.at(ptr), v)) problems.push_back(std::string(path) + ": " + *err);
  });
  std::vector<std::string> present;
  collect_paths(j, "", present);
  for (const auto& path : present) {
    if (!known.count(path)) problems.push_back(path + ": unknown field");
  }
  for (auto& s : validate(c)) {
    // Avoid repeating a field already reported as ill-typed.
    const auto field = s.substr(0, s.find(':'));
    const bool dup = std::any_of(problems.begin(), problems.end(), [&](const std::string& q) {
      return q.rfind(field + ":", 0) == 0;
    });
    if (!dup) problems.push_back(std::move(s));
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace shiftlab
