#pragma once

// Experiment configuration. Serialized as JSON with the same nested layout
// as the struct:
//
//   {"algorithm": "sharpdro_aware", "seed": 0,
//    "data": {...}, "model": {...}, "optimizer": {...}, "hyper": {...}}
//
// Parsing starts from defaults_for(algorithm) and overrides only the keys
// present, so a config file may be partial. Unknown keys and ill-typed
// values are validation errors; every problem is reported at once.

#include <cstdint>
#include <string>
#include <vector>

namespace shiftlab {

inline const std::vector<std::string>& known_algorithms() {
  static const std::vector<std::string> names{"erm",      "groupdro",          "irm",
                                              "rex",      "sharpdro_aware",    "sharpdro_agnostic",
                                              "evil",     "evil_sam",          "hood"};
  return names;
}

struct DataConfig {
  // Corrupted toy images (severity tasks).
  std::string kind = "gaussian";
  double lambda = 1.0;
  int max_severity = 5;
  std::size_t n_train = 2000;
  std::size_t n_test_per_severity = 500;
  /// Load the training / test split from a build-data directory instead of
  /// generating it.
  std::string dir;
  // Synthetic environments (evil).
  int m_inv = 8;
  int m_var = 32;
  std::vector<double> p{0.6, 0.7, 0.8};
  std::size_t n_per_env = 1000;
  double domain_skew = 0.5;
  // Content/style toy (hood).
  std::size_t toy_train = 800;
  std::size_t toy_test = 400;
};

struct ModelConfig {
  std::string kind = "mlp";
  int hidden = 32;
  std::string activation = "tanh";
  double init_scale = 1.0;
  int latent = 4;
};

struct OptimizerConfig {
  double lr = 0.1;
  double momentum = 0.0;
  double weight_decay = 0.0;
  long iterations = 1000;
  std::size_t batch_size = 0;
};

struct HyperConfig {
  double rho = 0.05;
  double eta = 1e-2;
  double lambda_irm = 1e2;
  double lambda_rex = 1e1;
  double score_smoothing = 0.0;
  // evil
  std::string reg = "erm";
  double sparsity = 0.8;
  double alpha = 0.2;
  long delta_t = 300;
  long t_pre = 1000;
  std::string recall = "domain";
  double domain_lr = 0.1;
  // hood
  double epsilon = 0.03;
  int steps = 15;
  std::string aug = "both";
  double aug_fraction = 0.5;
  double unlabeled_fraction = 0.0;
};

struct ExperimentConfig {
  std::string algorithm = "sharpdro_aware";
  std::uint64_t seed = 0;
  long eval_every = 100;
  long log_every = 1;
  DataConfig data;
  ModelConfig model;
  OptimizerConfig optimizer;
  HyperConfig hyper;
};

/// Defaults with the optimizer and model tuned for the algorithm's toy task.
/// Unknown names fall back to the generic defaults (validation reports them).
ExperimentConfig defaults_for(const std::string& algorithm);

/// Every offending field, empty when valid.
std::vector<std::string> validate(const ExperimentConfig& config);

/// Throws ConfigError listing every problem.
void require_valid(const ExperimentConfig& config);

/// Canonical JSON (sorted keys, shortest round-trip doubles).
std::string to_json(const ExperimentConfig& config);

/// Parses and validates; throws ConfigError on any problem.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);

}  // namespace shiftlab
