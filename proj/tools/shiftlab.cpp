#include "shiftlab/config.hpp"
#include "shiftlab/errors.hpp"
#include "shiftlab/harness.hpp"
#include "shiftlab/run_record.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace shiftlab;

namespace {

constexpr int kOk = 0;
constexpr int kRuntimeError = 1;
constexpr int kValidationError = 2;

// Flags shared by every command that builds an ExperimentConfig. Values only
// override the config when the flag was given.
struct Common {
  std::string config_path;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  long iterations = 0;
  CLI::Option* iterations_opt = nullptr;
  double lr = 0;
  CLI::Option* lr_opt = nullptr;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool training) {
  cmd->add_option("--config", c.config_path, "JSON config; explicit flags override it")
      ->check(CLI::ExistingFile);
  c.seed_opt = cmd->add_option("--seed", c.seed, "Master seed");
  if (training) {
    c.iterations_opt = cmd->add_option("--iterations", c.iterations, "Training iterations");
    c.lr_opt = cmd->add_option("--lr", c.lr, "Learning rate");
    cmd->add_option("--out", c.out, "Run directory (record, config, checkpoint)");
  }
}

template <typename T>
void set_if(CLI::Option* opt, T& field, const T& value) {
  if (opt != nullptr && opt->count() > 0) field = value;
}

bool same_family(const std::string& a, const std::string& b) {
  auto family = [](const std::string& s) -> std::string {
    if (s.rfind("sharpdro", 0) == 0) return "sharpdro";
    if (s.rfind("evil", 0) == 0) return "evil";
    if (s == "hood") return "hood";
    return "baseline";
  };
  return family(a) == family(b);
}

// Config file when given (its algorithm must belong to the command), else the
// algorithm defaults; then the shared flags.
ExperimentConfig base_config(const Common& c, const std::string& algorithm) {
  ExperimentConfig cfg = defaults_for(algorithm);
  if (!c.config_path.empty()) {
    cfg = load_config(c.config_path);
    if (!same_family(cfg.algorithm, algorithm)) {
      throw ConfigError({"config algorithm '" + cfg.algorithm + "' does not match command '" +
                         algorithm + "'"});
    }
  }
  cfg.algorithm = algorithm;
  set_if(c.seed_opt, cfg.seed, c.seed);
  set_if(c.iterations_opt, cfg.optimizer.iterations, c.iterations);
  set_if(c.lr_opt, cfg.optimizer.lr, c.lr);
  return cfg;
}

void print_summary(const RunRecord& rec, const std::string& out) {
  std::cout << "run " << rec.run_id << " (" << rec.algorithm << ", seed " << rec.seed << ", "
            << rec.wall_clock_seconds << " s)\n";
  for (const auto& [k, v] : rec.summary) std::cout << "  " << k << " = " << v << "\n";
  if (!out.empty()) std::cout << "written to " << out << "\n";
}

int finish_run(const ExperimentConfig& cfg, const std::string& out) {
  const RunRecord rec = harness::run(cfg, out.empty() ? std::nullopt : std::optional<fs::path>(out));
  print_summary(rec, out);
  return kOk;
}

// Run directories under each path: the path itself when it holds run.json,
// else its immediate children that do.
std::vector<RunRecord> collect_runs(const std::vector<std::string>& paths) {
  std::vector<RunRecord> out;
  for (const auto& p : paths) {
    const fs::path dir(p);
    if (fs::exists(dir / "run.json")) {
      out.push_back(load_run_record(dir));
      continue;
    }
    if (!fs::is_directory(dir)) throw IoError("no run record at " + p);
    std::vector<fs::path> children;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_directory() && fs::exists(e.path() / "run.json")) children.push_back(e.path());
    }
    std::sort(children.begin(), children.end());
    if (children.empty()) throw IoError("no run records under " + p);
    for (const auto& c : children) out.push_back(load_run_record(c));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"shiftlab: robust training under distribution shift"};
  app.require_subcommand(1);
  std::string log_level = "warn";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error, off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  // build-data
  auto* build = app.add_subcommand("build-data", "Generate a corrupted train/test dataset");
  Common build_c;
  add_common(build, build_c, false);
  std::string kind;
  double lambda = 1.0;
  int max_severity = 5;
  std::size_t n_train = 0;
  std::string data_out;
  auto* kind_opt = build->add_option("--kind", kind, "gaussian or shot");
  auto* lambda_opt = build->add_option("--lambda", lambda, "Poisson rate of the severity law");
  auto* sev_opt = build->add_option("--max-severity", max_severity, "Highest severity S");
  auto* ntrain_opt = build->add_option("--n-train", n_train, "Training examples");
  build->add_option("--out", data_out, "Output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "Train a model and persist the run");
  train->require_subcommand(1);

  auto* sharp = train->add_subcommand("sharpdro", "Worst-case sharpness minimization");
  Common sharp_c;
  add_common(sharp, sharp_c, true);
  std::string mode = "aware";
  double rho = 0;
  double eta = 0;
  std::string data_dir;
  double smoothing = 0;
  int hidden = 0;
  sharp->add_option("--mode", mode, "aware (severity labels) or agnostic (OOD scores)")
      ->check(CLI::IsMember({"aware", "agnostic"}));
  auto* rho_opt = sharp->add_option("--rho", rho, "Perturbation scale");
  auto* eta_opt = sharp->add_option("--eta", eta, "Group-weight ascent step");
  auto* data_opt = sharp->add_option("--data", data_dir, "build-data directory");
  auto* smooth_opt = sharp->add_option("--score-smoothing", smoothing, "EMA factor for agnostic scores");
  auto* hidden_opt = sharp->add_option("--hidden", hidden, "MLP width");

  auto* base = train->add_subcommand("baseline", "ERM, GroupDRO, IRM or REx on the severity task");
  Common base_c;
  add_common(base, base_c, true);
  std::string base_algo = "erm";
  std::string base_data;
  base->add_option("--algo", base_algo, "erm, groupdro, irm or rex")
      ->check(CLI::IsMember({"erm", "groupdro", "irm", "rex"}));
  auto* base_data_opt = base->add_option("--data", base_data, "build-data directory");
  double base_eta = 0;
  auto* base_eta_opt = base->add_option("--eta", base_eta, "GroupDRO weight step");

  auto* evil = train->add_subcommand("evil", "Invariant sparse subnetwork training");
  Common evil_c;
  add_common(evil, evil_c, true);
  std::string reg;
  double sparsity = 0;
  double alpha = 0;
  long delta_t = 0;
  long t_pre = 0;
  std::string recall;
  bool sam = false;
  double evil_rho = 0;
  auto* reg_opt = evil->add_option("--reg", reg, "erm, irm, rex or dro")
                      ->check(CLI::IsMember({"erm", "irm", "rex", "dro"}));
  auto* sparsity_opt = evil->add_option("--sparsity", sparsity, "Pruned fraction R");
  auto* alpha_opt = evil->add_option("--alpha", alpha, "Initial swap fraction");
  auto* delta_opt = evil->add_option("--delta-t", delta_t, "Mask update interval");
  auto* tpre_opt = evil->add_option("--t-pre", t_pre, "Dense pretraining iterations");
  auto* recall_opt = evil->add_option("--recall", recall, "domain or task (RigL-style ablation)")
                         ->check(CLI::IsMember({"domain", "task"}));
  evil->add_flag("--sam", sam, "Sharpness-aware variant on the kept coordinates");
  auto* evil_rho_opt = evil->add_option("--rho", evil_rho, "Perturbation scale for --sam");

  auto* hood = train->add_subcommand("hood", "Content/style disentanglement with augmentation");
  Common hood_c;
  add_common(hood, hood_c, true);
  std::string aug;
  double eps = 0;
  int steps = 0;
  auto* aug_opt = hood->add_option("--aug", aug, "both, pos, neg or none")
                      ->check(CLI::IsMember({"both", "pos", "neg", "none"}));
  auto* eps_opt = hood->add_option("--eps", eps, "PGD step size");
  auto* steps_opt = hood->add_option("--steps", steps, "PGD steps");

  // diagnose
  auto* diag = app.add_subcommand("diagnose", "Diagnostics on a trained checkpoint");
  std::string diag_kind;
  std::string ckpt;
  std::string diag_data;
  double diag_rho = 0.05;
  std::string diag_out;
  diag->add_option("kind", diag_kind, "sharpness, gradnorm, gradvar or hessian")
      ->required()
      ->check(CLI::IsMember({"sharpness", "gradnorm", "gradvar", "hessian"}));
  diag->add_option("--ckpt", ckpt, "Checkpoint directory (<run>/ckpt)")->required();
  diag->add_option("--data", diag_data, "build-data directory");
  diag->add_option("--rho", diag_rho, "Perturbation scale for sharpness");
  diag->add_option("--out", diag_out, "Write the CSV here instead of stdout");

  // compare
  auto* cmp = app.add_subcommand("compare", "Seed-averaged comparison of runs");
  std::vector<std::string> runs;
  std::string metric = "acc";
  std::string group_by = "severity";
  std::string cmp_csv;
  cmp->add_option("runs", runs, "Run directories or parents of run directories")->required();
  cmp->add_option("--metric", metric, "Summary metric stem");
  cmp->add_option("--group-by", group_by, "severity, env or none")
      ->check(CLI::IsMember({"severity", "env", "none"}));
  cmp->add_option("--csv", cmp_csv, "Also write the CSV table here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kValidationError;
  }

  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (*build) {
      ExperimentConfig cfg = base_config(build_c, "erm");
      set_if(kind_opt, cfg.data.kind, kind);
      set_if(lambda_opt, cfg.data.lambda, lambda);
      set_if(sev_opt, cfg.data.max_severity, max_severity);
      set_if(ntrain_opt, cfg.data.n_train, n_train);
      cfg.data.dir.clear();
      harness::build_data(cfg, data_out);
      std::cout << "dataset written to " << data_out << "\n";
      return kOk;
    }
    if (*sharp) {
      ExperimentConfig cfg =
          base_config(sharp_c, mode == "aware" ? "sharpdro_aware" : "sharpdro_agnostic");
      set_if(rho_opt, cfg.hyper.rho, rho);
      set_if(eta_opt, cfg.hyper.eta, eta);
      set_if(data_opt, cfg.data.dir, data_dir);
      set_if(smooth_opt, cfg.hyper.score_smoothing, smoothing);
      set_if(hidden_opt, cfg.model.hidden, hidden);
      return finish_run(cfg, sharp_c.out);
    }
    if (*base) {
      ExperimentConfig cfg = base_config(base_c, base_algo);
      set_if(base_data_opt, cfg.data.dir, base_data);
      set_if(base_eta_opt, cfg.hyper.eta, base_eta);
      return finish_run(cfg, base_c.out);
    }
    if (*evil) {
      ExperimentConfig cfg = base_config(evil_c, sam ? "evil_sam" : "evil");
      set_if(reg_opt, cfg.hyper.reg, reg);
      set_if(sparsity_opt, cfg.hyper.sparsity, sparsity);
      set_if(alpha_opt, cfg.hyper.alpha, alpha);
      set_if(delta_opt, cfg.hyper.delta_t, delta_t);
      set_if(tpre_opt, cfg.hyper.t_pre, t_pre);
      set_if(recall_opt, cfg.hyper.recall, recall);
      set_if(evil_rho_opt, cfg.hyper.rho, evil_rho);
      return finish_run(cfg, evil_c.out);
    }
    if (*hood) {
      ExperimentConfig cfg = base_config(hood_c, "hood");
      set_if(aug_opt, cfg.hyper.aug, aug);
      set_if(eps_opt, cfg.hyper.epsilon, eps);
      set_if(steps_opt, cfg.hyper.steps, steps);
      return finish_run(cfg, hood_c.out);
    }
    if (*diag) {
      const auto k = harness::diagnostic_from_string(diag_kind);
      const std::string csv = harness::diagnose(
          *k, ckpt, diag_data.empty() ? std::nullopt : std::optional<fs::path>(diag_data), diag_rho);
      if (diag_out.empty()) {
        std::cout << csv;
      } else {
        std::ofstream(diag_out) << csv;
      }
      return kOk;
    }
    if (*cmp) {
      const auto report = harness::compare(collect_runs(runs), metric, group_by);
      std::cout << report.text();
      if (!cmp_csv.empty()) std::ofstream(cmp_csv) << report.csv();
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kValidationError;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidationError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kRuntimeError;
}
