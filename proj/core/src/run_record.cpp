#include "shiftlab/run_record.hpp"

#include "shiftlab/dataset_io.hpp"
#include "shiftlab/errors.hpp"
#include "shiftlab/rng.hpp"

#include <json.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace shiftlab {

namespace fs = std::filesystem;
using nlohmann::json;

MetricRow& RunRecord::add_row(long iteration) {
  if (!rows.empty() && iteration <= rows.back().iteration) {
    throw InvariantError("RunRecord: iteration indices must be strictly increasing");
  }
  rows.push_back(MetricRow{iteration, {}, {}});
  return rows.back();
}

void RunRecord::set_summary(const std::string& name, double value) {
  for (auto& [k, v] : summary) {
    if (k == name) {
      v = value;
      return;
    }
  }
  summary.emplace_back(name, value);
}

std::optional<double> RunRecord::summary_value(const std::string& name) const {
  for (const auto& [k, v] : summary) {
    if (k == name) return v;
  }
  return std::nullopt;
}

bool RunRecord::same_metrics(const RunRecord& other) const {
  return run_id == other.run_id && algorithm == other.algorithm && seed == other.seed &&
         config_json == other.config_json && rows == other.rows && summary == other.summary;
}

std::string make_run_id(const std::string& algorithm, std::uint64_t seed,
                        const std::string& config_json) {
  const std::uint64_t h = mix64(fnv1a64(config_json) ^ mix64(seed));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return algorithm + "-s" + std::to_string(seed) + "-" + std::string(buf, 8);
}

namespace {

json encode(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

double decode(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "nan") return std::nan("");
    if (s == "inf") return HUGE_VAL;
    if (s == "-inf") return -HUGE_VAL;
    throw IoError("RunRecord: bad numeric value '" + s + "'");
  }
  return j.get<double>();
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string read_text(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void save_run_record(const RunRecord& record, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  std::string lines;
  for (const auto& row : record.rows) {
    json j;
    j["iteration"] = row.iteration;
    json scalars = json::object();
    for (const auto& [k, v] : row.scalars) scalars[k] = encode(v);
    json vectors = json::object();
    for (const auto& [k, vs] : row.vectors) {
      json arr = json::array();
      for (double v : vs) arr.push_back(encode(v));
      vectors[k] = std::move(arr);
    }
    j["scalars"] = std::move(scalars);
    j["vectors"] = std::move(vectors);
    lines += j.dump();
    lines += '\n';
  }

  std::string csv;
  for (std::size_t i = 0; i < record.summary.size(); ++i) {
    csv += (i ? "," : "") + record.summary[i].first;
  }
  csv += '\n';
  for (std::size_t i = 0; i < record.summary.size(); ++i) {
    csv += (i ? "," : "") + format_double(record.summary[i].second);
  }
  csv += '\n';

  json meta;
  meta["format"] = 1;
  meta["run_id"] = record.run_id;
  meta["algorithm"] = record.algorithm;
  meta["seed"] = record.seed;
  meta["config"] = record.config_json;
  meta["wall_clock_seconds"] = encode(record.wall_clock_seconds);
  json summary = json::array();
  for (const auto& [k, v] : record.summary) summary.push_back(json::array({k, encode(v)}));
  meta["summary"] = std::move(summary);

  // Remove a stale commit marker first so a crash mid-write never pairs an
  // old run.json with new metrics.
  fs::remove(dir / "run.json", ec);
  io::write_file_atomic(dir / "metrics.jsonl", lines);
  io::write_file_atomic(dir / "summary.csv", csv);
  io::write_file_atomic(dir / "run.json", meta.dump(2) + "\n");
}

RunRecord load_run_record(const fs::path& dir) {
  if (!fs::exists(dir / "run.json")) {
    throw IoError("no complete run record in " + dir.string());
  }
  RunRecord r;
  try {
    const json meta = json::parse(read_text(dir / "run.json"));
    r.run_id = meta.at("run_id").get<std::string>();
    r.algorithm = meta.at("algorithm").get<std::string>();
    r.seed = meta.at("seed").get<std::uint64_t>();
    r.config_json = meta.at("config").get<std::string>();
    r.wall_clock_seconds = decode(meta.at("wall_clock_seconds"));
    for (const auto& e : meta.at("summary")) {
      r.summary.emplace_back(e.at(0).get<std::string>(), decode(e.at(1)));
    }

    std::istringstream in(read_text(dir / "metrics.jsonl"));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      MetricRow& row = r.add_row(j.at("iteration").get<long>());
      for (const auto& [k, v] : j.at("scalars").items()) row.scalars[k] = decode(v);
      for (const auto& [k, arr] : j.at("vectors").items()) {
        auto& out = row.vectors[k];
        for (const auto& v : arr) out.push_back(decode(v));
      }
    }
  } catch (const json::exception& e) {
    throw IoError("malformed run record in " + dir.string() + ": " + e.what());
  }
  return r;
}

}  // namespace shiftlab
