// Acceptance checks, one line per criterion. Usage: shiftlab_acceptance [N...]
// With no arguments every criterion runs. Exit status is nonzero if any fails.
#include "shiftlab/config.hpp"
#include "shiftlab/corruption_data.hpp"
#include "shiftlab/diagnostics.hpp"
#include "shiftlab/evil.hpp"
#include "shiftlab/harness.hpp"
#include "shiftlab/run_record.hpp"
#include "shiftlab/sharpdro.hpp"

#include <fmt/core.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <sstream>

using namespace shiftlab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

constexpr int kSeeds = 5;

double summary(const RunRecord& r, const std::string& key) {
  for (const auto& [k, v] : r.summary) {
    if (k == key) return v;
  }
  throw std::runtime_error("missing summary metric " + key);
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string join(const std::vector<double>& v, int precision = 3) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? " " : "") + fmt::format("{:.{}f}", v[i], precision);
  return out;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("shiftlab_acceptance_" + name);
  fs::remove_all(p);
  return p;
}

// Reads the value column of a "severity,<name>,count" CSV.
std::map<int, double> read_severity_csv(const std::string& csv) {
  std::map<int, double> out;
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream row(line);
    std::string s, v;
    std::getline(row, s, ',');
    std::getline(row, v, ',');
    out[std::stoi(s)] = std::stod(v);
  }
  return out;
}

Outcome poisson_fidelity() {
  const auto dist = data::make_severity_distribution(1.0, 5);
  const auto s = data::assign_severities(100000, dist, 1);
  const double expected[] = {0.367, 0.367, 0.184, 0.061, 0.015, 0.003};
  std::vector<double> freq(6, 0.0);
  for (int v : s) freq[static_cast<std::size_t>(v)] += 1.0 / static_cast<double>(s.size());
  double worst = 0.0;
  for (int k = 0; k <= 5; ++k) worst = std::max(worst, std::abs(freq[static_cast<std::size_t>(k)] - expected[k]));
  return {worst <= 0.01, fmt::format("freq [{}] max dev {:.4f}", join(freq, 4), worst)};
}

sharpdro::Batch grouped_batch(int n, int dim, int groups, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> nd;
  sharpdro::Batch b;
  b.x.resize(n, dim);
  for (Eigen::Index i = 0; i < b.x.size(); ++i) b.x.data()[i] = nd(rng);
  for (int i = 0; i < n; ++i) {
    b.y.push_back(i % 2);
    b.group.push_back(i % groups);
    b.index.push_back(static_cast<std::size_t>(i));
  }
  return b;
}

Outcome reduction_laws() {
  using models::ParamGroup;
  const auto b = grouped_batch(40, 8, 4, 21);
  Rng rng(22);
  const models::DualHeadModel base(models::ModelSpec{models::ExtractorKind::mlp, 8, 6, 2, 1}, rng);
  sharpdro::StepConfig cfg;
  cfg.rho = 0.0;

  auto a = base;
  auto c = base;
  auto wa = sharpdro::WorstCaseWeights::uniform_groups(4, 0.5);
  auto wc = wa;
  optim::Sgd oa(0.2, 0.9), oc(0.2, 0.9);
  sharpdro::sharpdro_step(a, b, wa, cfg, oa);
  sharpdro::groupdro_step(c, b, wc, oc);
  const double dro = std::max((a.flat(ParamGroup::all) - c.flat(ParamGroup::all)).cwiseAbs().maxCoeff(),
                              (wa.values - wc.values).cwiseAbs().maxCoeff());

  auto e = base;
  auto f = base;
  auto w = sharpdro::WorstCaseWeights::uniform_examples(b.size(), true);
  optim::Sgd oe(0.2), of(0.2);
  sharpdro::sharpdro_step(e, b, w, cfg, oe);
  sharpdro::erm_step(f, b, of);
  const double erm = (e.flat(ParamGroup::all) - f.flat(ParamGroup::all)).cwiseAbs().maxCoeff();
  return {dro <= 1e-10 && erm <= 1e-10, fmt::format("|aware - groupdro| {:.2e}, |frozen uniform - erm| {:.2e}", dro, erm)};
}

std::vector<RunRecord> runs(const std::string& algo,
                            const std::function<void(ExperimentConfig&)>& tweak = {},
                            bool persist = false) {
  std::vector<RunRecord> out;
  for (int s = 0; s < kSeeds; ++s) {
    auto c = defaults_for(algo);
    c.seed = static_cast<std::uint64_t>(s);
    if (tweak) tweak(c);
    if (persist) {
      out.push_back(harness::run(c, scratch(algo + std::to_string(s))));
    } else {
      out.push_back(harness::run(c));
    }
  }
  return out;
}

std::vector<double> metric(const std::vector<RunRecord>& rs, const std::string& key) {
  std::vector<double> v;
  for (const auto& r : rs) v.push_back(summary(r, key));
  return v;
}

Outcome worst_case_direction() {
  const auto erm = metric(runs("erm"), "worst_acc");
  const auto dro = metric(runs("groupdro"), "worst_acc");
  const auto aware = metric(runs("sharpdro_aware"), "worst_acc");
  const double margin = mean(aware) - mean(erm);
  return {margin > 0.0 && mean(aware) > mean(dro),
          fmt::format("worst-severity acc mean: erm {:.4f} groupdro {:.4f} sharpdro_aware {:.4f} (margin {:+.4f})",
                      mean(erm), mean(dro), mean(aware), margin)};
}

Outcome sharpness_direction() {
  const auto diag = [](const std::string& algo, int seed) {
    const auto dir = scratch(algo + "_sharp" + std::to_string(seed));
    auto c = defaults_for(algo);
    c.seed = static_cast<std::uint64_t>(seed);
    c.eval_every = 0;
    harness::run(c, dir);
    const auto table = read_severity_csv(harness::diagnose(harness::DiagnosticKind::sharpness, dir / "ckpt"));
    fs::remove_all(dir);
    return table;
  };
  std::vector<double> rho, erm5, dro5;
  for (int s = 0; s < kSeeds; ++s) {
    const auto e = diag("erm", s);
    const auto d = diag("sharpdro_aware", s);
    std::vector<double> sev, val;
    for (const auto& [k, v] : e) {
      sev.push_back(k);
      val.push_back(v);
    }
    rho.push_back(diagnostics::spearman(sev, val));
    erm5.push_back(e.rbegin()->second);
    dro5.push_back(d.rbegin()->second);
  }
  const bool monotone = std::all_of(rho.begin(), rho.end(), [](double r) { return r > 0.0; });
  return {monotone && mean(dro5) < mean(erm5),
          fmt::format("erm spearman [{}]; worst-severity sharpness mean erm {:.4f} sharpdro {:.4f}", join(rho, 2),
                      mean(erm5), mean(dro5))};
}

Outcome mask_conservation() {
  std::mt19937_64 rng(77);
  int bad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = std::uniform_int_distribution<int>(2, 80)(rng);
    evil::ParameterMask m;
    m.bits.resize(static_cast<std::size_t>(n));
    for (auto& b : m.bits) b = static_cast<unsigned char>(rng() & 1u);
    m.bits[0] = 1;
    m.bits[1] = 0;
    Eigen::VectorXd gt(n), gd(n);
    std::uniform_int_distribution<int> coarse(-4, 4);
    for (int i = 0; i < n; ++i) {
      gt(i) = coarse(rng) * 0.25;
      gd(i) = coarse(rng) * 0.25;
    }
    std::vector<std::size_t> kept, pruned;
    for (std::size_t i = 0; i < m.size(); ++i) (m.bits[i] ? kept : pruned).push_back(i);
    const long k = std::uniform_int_distribution<long>(0, static_cast<long>(std::min(kept.size(), pruned.size())))(rng);
    const auto out =
        evil::update_mask(m, {gt, models::GradientSource::task, 0}, {gd, models::GradientSource::domain, 0}, k);

    // Brute force: sort (key, index) pairs and take the first k.
    const auto select = [&](const std::vector<std::size_t>& idx, const Eigen::VectorXd& g) {
      std::vector<std::pair<double, std::size_t>> keyed;
      for (std::size_t i : idx) keyed.emplace_back(std::abs(g(static_cast<Eigen::Index>(i))), i);
      std::sort(keyed.begin(), keyed.end());
      std::vector<unsigned char> hit(m.size(), 0);
      for (long i = 0; i < k; ++i) hit[keyed[static_cast<std::size_t>(i)].second] = 1;
      return hit;
    };
    const auto drop = select(kept, gt);
    const auto grow = select(pruned, gd);
    bool ok = out.kept() == m.kept() && out.size() == m.size();
    for (std::size_t i = 0; i < m.size() && ok; ++i) {
      const bool want = m.bits[i] ? !drop[i] : static_cast<bool>(grow[i]);
      ok = (out.bits[i] != 0) == want && (out.bits[i] == 0 || out.bits[i] == 1);
    }
    bad += ok ? 0 : 1;
  }
  return {bad == 0, fmt::format("{} of 1000 fuzzed updates disagree with the oracle", bad)};
}

Outcome evil_recovery() {
  const auto evil = metric(runs("evil"), "invariant_coverage");
  const auto rigl = metric(runs("evil", [](ExperimentConfig& c) { c.hyper.recall = "task"; }), "invariant_coverage");
  return {mean(evil) >= 0.75 && mean(rigl) <= 0.60,
          fmt::format("coverage evil [{}] mean {:.3f}; task-gradient ablation [{}] mean {:.3f}", join(evil), mean(evil),
                      join(rigl), mean(rigl))};
}

Outcome gradient_variance_direction() {
  const auto rs = runs("evil");
  const auto inv = metric(rs, "grad_var_inv");
  const auto var = metric(rs, "grad_var_var");
  int ok = 0;
  std::string detail;
  for (int s = 0; s < kSeeds; ++s) {
    ok += inv[static_cast<std::size_t>(s)] < var[static_cast<std::size_t>(s)] ? 1 : 0;
    detail += fmt::format("{}{:.2e}<{:.2e}", s ? " " : "", inv[static_cast<std::size_t>(s)],
                          var[static_cast<std::size_t>(s)]);
  }
  return {ok == kSeeds, fmt::format("V_inv < V_var on {}/{} seeds ({})", ok, kSeeds, detail)};
}

Outcome hessian_oracle() {
  Rng rng(3);
  models::DualHeadModel model({models::ExtractorKind::mlp, 64, 2, 2, 1}, rng);
  const auto n = static_cast<int>(model.count(models::ParamGroup::classifier));
  Rng drng(1);
  const auto src = data::make_toy_images(600, data::ToyImageSpec{}, drng);
  const auto ds = data::build_corrupted_dataset(src, data::CorruptionKind::gaussian, 1.0, 3);
  const auto batch = sharpdro::to_batch(ds);
  const auto loss = sharpdro::mean_cross_entropy();
  const auto l = diagnostics::hessian_lanczos(model, loss, batch, 3, n);
  const auto d = diagnostics::hessian_dense(model, loss, batch, 3);
  const double rel = std::abs(l.eigenvalues[0] - d.eigenvalues[0]) / std::abs(d.eigenvalues[0]);

  const diagnostics::GradFn quad = [](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
    if (g) *g = x;
    return 0.5 * x.squaredNorm();
  };
  const Eigen::VectorXd x0 = Eigen::VectorXd::LinSpaced(50, -2.0, 2.0);
  const diagnostics::Hvp hvp = [&](const Eigen::VectorXd& v) { return diagnostics::finite_difference_hvp(quad, x0, v); };
  const auto id = diagnostics::lanczos_top_k(hvp, 50, 5);
  double id_dev = 0.0;
  for (double e : id.eigenvalues) id_dev = std::max(id_dev, std::abs(e - 1.0));
  return {n <= 200 && rel <= 0.01 && id.eigenvalues.size() == 5 && id_dev <= 1e-6,
          fmt::format("{} params, lanczos {:.6g} dense {:.6g} (rel {:.2e}); identity max dev {:.2e}", n,
                      l.eigenvalues[0], d.eigenvalues[0], rel, id_dev)};
}

Outcome hood_semantics() {
  const auto rs = runs("hood");
  const auto nf = mean(metric(rs, "neg_content_flip"));
  const auto nk = mean(metric(rs, "neg_style_kept"));
  const auto pf = mean(metric(rs, "pos_style_flip"));
  const auto pk = mean(metric(rs, "pos_content_kept"));
  return {nf > 0.5 && nk >= 0.9 && pf > 0.5 && pk >= 0.9,
          fmt::format("negative: content flipped {:.3f}, style kept {:.3f}; positive: style flipped {:.3f}, "
                      "content kept {:.3f} (5-seed means)",
                      nf, nk, pf, pk)};
}

Outcome hood_score_separation() {
  const auto rs = runs("hood");
  const auto hat = metric(rs, "score_x_hat");
  const auto bar = metric(rs, "score_x_bar");
  const double gap = mean(hat) - mean(bar);
  return {gap >= 0.2, fmt::format("score x_hat {:.3f} x_bar {:.3f} gap {:.3f}", mean(hat), mean(bar), gap)};
}

Outcome regularizer_arithmetic() {
  const double rex = evil::rex_penalty((Eigen::VectorXd(2) << 0.2, 0.4).finished());
  // Exact population variance of the two doubles: ((b - a) / 2)^2 needs at
  // most 106 significant bits, so quad precision holds it without rounding.
  const __float128 half = (static_cast<__float128>(0.4) - static_cast<__float128>(0.2)) / 2;
  const double rex_exact = static_cast<double>(half * half);
  const double rex_ulps = (rex - 0.01) / (std::nextafter(0.01, 1.0) - 0.01);

  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd(0.0, 2.0);
  std::vector<Eigen::MatrixXd> logits;
  std::vector<std::vector<int>> labels;
  double fd = 0.0;
  const double h = 1e-5;
  const auto ce = [](const Eigen::RowVectorXd& z, int y, double s) {
    const Eigen::RowVectorXd a = s * z;
    const double m = a.maxCoeff();
    return m + std::log((a.array() - m).exp().sum()) - a(y);
  };
  for (int e = 0; e < 3; ++e) {
    Eigen::MatrixXd z(6, 3);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = nd(rng);
    std::vector<int> y;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      y.push_back(static_cast<int>((i + e) % 3));
      const double d = (ce(z.row(i), y.back(), 1 + h) - ce(z.row(i), y.back(), 1 - h)) / (2 * h);
      fd += d * d;
    }
    logits.push_back(z);
    labels.push_back(y);
  }
  const double irm = evil::irm_penalty_sum(logits, labels);
  const double irm_rel = std::abs(irm - fd) / std::abs(fd);

  const auto w = sharpdro::update_group_weights(sharpdro::WorstCaseWeights::uniform_groups(2),
                                                (Eigen::VectorXd(2) << 1, 0).finished(), 1e-2);
  const double dro_dev = std::max(std::abs(w.values(0) - 0.50250), std::abs(w.values(1) - 0.49750));

  const bool rex_ok = rex == rex_exact;
  return {rex_ok && irm_rel <= 1e-4 && dro_dev <= 1e-5,
          fmt::format("rex {:.17g} (correctly rounded exact variance {:.17g}, {:+.0f} ulp from 0.01), "
                      "irm rel err {:.2e}, groupdro dev {:.2e}",
                      rex, rex_exact, rex_ulps, irm_rel, dro_dev)};
}

Outcome determinism_and_persistence() {
  std::vector<std::string> failures;
  for (const std::string algo : {"erm", "sharpdro_aware", "evil", "hood"}) {
    auto c = defaults_for(algo);
    c.seed = 11;
    const auto dir = scratch("det_" + algo);
    const auto a = harness::run(c, dir);
    const auto b = harness::run(c);
    const auto loaded = load_run_record(dir);
    if (!a.same_metrics(b)) failures.push_back(algo + " rerun differs");
    if (!(loaded.rows == a.rows) || !loaded.same_metrics(a) || loaded.run_id != a.run_id ||
        loaded.config_json != a.config_json) {
      failures.push_back(algo + " round trip differs");
    }
    fs::remove_all(dir);
  }
  RunRecord r;
  r.algorithm = "erm";
  r.add_row(1).scalars["x"] = std::numeric_limits<double>::infinity();
  r.add_row(2).vectors["v"] = {0.1 + 0.2, -0.0, 4.9e-324, std::numeric_limits<double>::quiet_NaN()};
  const auto dir = scratch("det_special");
  save_run_record(r, dir);
  const auto back = load_run_record(dir);
  const auto& v = back.rows.at(1).vectors.at("v");
  if (back.rows.at(0).scalars.at("x") != r.rows.at(0).scalars.at("x") || v[0] != 0.1 + 0.2 ||
      !std::signbit(v[1]) || v[2] != 4.9e-324 || !std::isnan(v[3])) {
    failures.push_back("special values do not round trip");
  }
  fs::remove_all(dir);
  std::string detail = failures.empty() ? "erm, sharpdro_aware, evil, hood reruns and round trips identical" : "";
  for (const auto& f : failures) detail += (detail.empty() ? "" : "; ") + f;
  return {failures.empty(), detail};
}

struct Criterion {
  const char* name;
  double budget_seconds;
  Outcome (*check)();
};

const Criterion kCriteria[] = {
    {"poisson fidelity", 5, poisson_fidelity},
    {"reduction laws", 1, reduction_laws},
    {"worst-case direction", 300, worst_case_direction},
    {"sharpness direction", 60, sharpness_direction},
    {"mask conservation", 10, mask_conservation},
    {"evil recovery", 180, evil_recovery},
    {"gradient-variance direction", 60, gradient_variance_direction},
    {"hessian oracle", 30, hessian_oracle},
    {"hood augmentation semantics", 120, hood_semantics},
    {"hood score separation", 120, hood_score_separation},
    {"regularizer arithmetic", 5, regularizer_arithmetic},
    {"determinism and persistence", 60, determinism_and_persistence},
};

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_level(spdlog::level::warn);
  std::vector<int> which;
  for (int i = 1; i < argc; ++i) which.push_back(std::atoi(argv[i]));
  if (which.empty()) {
    for (int i = 1; i <= 12; ++i) which.push_back(i);
  }
  int failed = 0;
  for (int id : which) {
    if (id < 1 || id > 12) {
      fmt::print(stderr, "unknown criterion {}\n", id);
      return 2;
    }
    const auto& c = kCriteria[id - 1];
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.budget_seconds;
    const bool pass = o.pass && in_time;
    fmt::print("criterion {:2} {} {}: {} [{:.2f}s of {:.0f}s]\n", id, pass ? "PASS" : "FAIL", c.name, o.detail, secs,
               c.budget_seconds);
    std::fflush(stdout);
    failed += pass ? 0 : 1;
  }
  return failed ? 1 : 0;
}
