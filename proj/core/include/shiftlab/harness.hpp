#pragma once

// Experiment orchestration: data construction from a config, dispatch to the
// training entry points, persistence, diagnostics on checkpoints and
// seed-averaged comparison tables.
//
// A run directory contains the RunRecord files (see run_record.hpp),
// config.json, and ckpt/ (model + mask) or pool/ (hood augmentations).

#include "shiftlab/config.hpp"
#include "shiftlab/corruption_data.hpp"
#include "shiftlab/hood.hpp"
#include "shiftlab/run_record.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace shiftlab::harness {

struct SeverityData {
  data::CorruptedDataset train;
  /// Every test row corrupted at a fixed severity; n_test_per_severity rows
  /// per severity 0..S.
  data::CorruptedDataset test;
};

/// Generated from the config's "data" substream, or loaded from data.dir.
SeverityData make_severity_data(const ExperimentConfig& config);
data::SyntheticEnvs make_env_data(const ExperimentConfig& config);

struct ToyPair {
  hood::ToyData train;
  hood::ToyData test;
};
ToyPair make_toy_data(const ExperimentConfig& config);

/// Writes <out>/train and <out>/test dataset directories.
void build_data(const ExperimentConfig& config, const std::filesystem::path& out);

/// Validates, trains, and (when out_dir is given) persists the run.
RunRecord run(const ExperimentConfig& config,
              const std::optional<std::filesystem::path>& out_dir = std::nullopt);

enum class DiagnosticKind { sharpness, gradnorm, gradvar, hessian };
std::optional<DiagnosticKind> diagnostic_from_string(const std::string& name);

/// Runs a diagnostic on a checkpoint directory and returns a CSV table. The
/// data comes from `data_dir` (a build-data directory), else from the
/// config.json next to the checkpoint, else from defaults.
std::string diagnose(DiagnosticKind kind, const std::filesystem::path& ckpt,
                     const std::optional<std::filesystem::path>& data_dir = std::nullopt,
                     double rho = 0.05);

struct CompareRow {
  std::string algorithm;
  std::size_t runs = 0;
  std::vector<double> mean;
  std::vector<double> stddev;
};

struct CompareReport {
  std::string metric;
  std::vector<std::string> groups;  // column labels, e.g. s0..s5
  std::vector<CompareRow> rows;

  std::string csv() const;
  std::string text() const;
};

/// Seed-averaged mean and sample standard deviation of a summary metric per
/// algorithm. group_by: "severity" (metric_s<k>), "env" (metric_env<k>) or
/// "none" (metric itself).
CompareReport compare(const std::vector<RunRecord>& records, const std::string& metric,
                      const std::string& group_by);

}  // namespace shiftlab::harness
