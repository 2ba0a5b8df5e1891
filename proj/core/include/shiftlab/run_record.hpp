#pragma once

// Persisted training runs. A record directory holds
//
//   metrics.jsonl  one JSON object per iteration:
//                  {"iteration": t, "scalars": {...}, "vectors": {...}}
//   summary.csv    header of summary names, one row of values
//   run.json       run id, algorithm, seed, config snapshot, wall clock and
//                  the summary; written last, so its presence marks a
//                  complete record
//
// Non-finite doubles are stored as the strings "nan", "inf" and "-inf".

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace shiftlab {

struct MetricRow {
  long iteration = 0;
  std::map<std::string, double> scalars;
  std::map<std::string, std::vector<double>> vectors;

  bool operator==(const MetricRow&) const = default;
};

struct RunRecord {
  std::string run_id;
  std::string algorithm;
  std::uint64_t seed = 0;
  /// Canonical JSON text of the configuration that produced the run.
  std::string config_json = "{}";
  std::vector<MetricRow> rows;
  /// Final summary in column order (e.g. acc_s0..acc_s5).
  std::vector<std::pair<std::string, double>> summary;
  double wall_clock_seconds = 0.0;

  /// Appends a row; iterations must be strictly increasing.
  MetricRow& add_row(long iteration);
  void set_summary(const std::string& name, double value);
  std::optional<double> summary_value(const std::string& name) const;

  bool operator==(const RunRecord&) const = default;
  /// Equality ignoring wall clock time.
  bool same_metrics(const RunRecord& other) const;
};

void save_run_record(const RunRecord& record, const std::filesystem::path& dir);
RunRecord load_run_record(const std::filesystem::path& dir);

/// Deterministic id from algorithm, seed and config text.
std::string make_run_id(const std::string& algorithm, std::uint64_t seed,
                        const std::string& config_json);

}  // namespace shiftlab
