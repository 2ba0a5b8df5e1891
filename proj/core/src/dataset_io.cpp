#include "shiftlab/dataset_io.hpp"

#include "shiftlab/errors.hpp"

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace shiftlab::io {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little,
              "binary dataset encoding assumes a little-endian host");

Manifest read_manifest(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open manifest " + file.string());
  Manifest m;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("malformed manifest line: " + line);
    m[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return m;
}

void write_file_atomic(const fs::path& file, const std::string& content) {
  fs::path tmp = file;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, file, ec);
  if (ec) throw IoError("rename " + tmp.string() + " failed: " + ec.message());
}

void write_manifest(const fs::path& file, const Manifest& manifest) {
  std::ostringstream out;
  for (const auto& [k, v] : manifest) out << k << '=' << v << '\n';
  write_file_atomic(file, out.str());
}

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename T>
std::string as_bytes(const T* data, std::size_t count) {
  return std::string(reinterpret_cast<const char*>(data), count * sizeof(T));
}

template <typename T>
std::vector<T> read_array(const fs::path& file, std::size_t expected) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  std::vector<T> out(expected);
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(expected * sizeof(T)));
  if (static_cast<std::size_t>(in.gcount()) != expected * sizeof(T)) {
    throw IoError("truncated array file " + file.string());
  }
  char extra;
  if (in.read(&extra, 1)) throw IoError("trailing bytes in " + file.string());
  return out;
}

const std::string& need(const Manifest& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw IoError("manifest missing key '" + key + "'");
  return it->second;
}

long long need_int(const Manifest& m, const std::string& key) {
  const auto& s = need(m, key);
  long long v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw IoError("manifest key '" + key + "' is not an integer");
  }
  return v;
}

double need_double(const Manifest& m, const std::string& key) {
  const auto& s = need(m, key);
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw IoError("manifest key '" + key + "' is not a number");
  }
  return v;
}

std::string matrix_bytes(const data::Matrix& x) {
  // Eigen default storage is column-major; the file is row-major.
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = x;
  return as_bytes(rm.data(), static_cast<std::size_t>(rm.size()));
}

data::Matrix matrix_from(const std::vector<double>& flat, long long n, long long dim) {
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
      flat.data(), n, dim);
  return m;
}

}  // namespace

void save_dataset(const data::CorruptedDataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  const auto n = ds.size();
  std::vector<std::int32_t> y(ds.y.begin(), ds.y.end());
  std::vector<std::int32_t> sev(ds.severity.begin(), ds.severity.end());
  write_file_atomic(dir / "x.f64", matrix_bytes(ds.x));
  write_file_atomic(dir / "y.i32", as_bytes(y.data(), y.size()));
  write_file_atomic(dir / "severity.i32", as_bytes(sev.data(), sev.size()));

  Manifest m;
  m["format"] = std::to_string(kDatasetFormatVersion);
  m["kind"] = std::string(data::to_string(ds.kind));
  m["lambda"] = format_double(ds.dist.lambda);
  m["S"] = std::to_string(ds.dist.max_severity);
  m["seed"] = std::to_string(ds.seed);
  m["n"] = std::to_string(n);
  m["dim"] = std::to_string(ds.x.cols());
  m["classes"] = std::to_string(ds.classes);
  const auto counts = ds.severity_counts();
  for (std::size_t s = 0; s < counts.size(); ++s) {
    m["count_" + std::to_string(s)] = std::to_string(counts[s]);
    m["weight_" + std::to_string(s)] = format_double(ds.dist.weights[s]);
    m["raw_" + std::to_string(s)] = format_double(ds.dist.raw[s]);
  }
  // Manifest last: its presence marks a complete dataset.
  write_manifest(dir / "manifest.txt", m);
}

data::CorruptedDataset load_dataset(const fs::path& dir) {
  const Manifest m = read_manifest(dir / "manifest.txt");
  if (need_int(m, "format") != kDatasetFormatVersion) {
    throw IoError("unsupported dataset format version in " + dir.string());
  }
  data::CorruptedDataset ds;
  ds.kind = data::corruption_kind_from_string(need(m, "kind"));
  ds.seed = static_cast<std::uint64_t>(std::stoull(need(m, "seed")));
  ds.classes = static_cast<int>(need_int(m, "classes"));
  ds.dist = data::make_severity_distribution(need_double(m, "lambda"),
                                             static_cast<int>(need_int(m, "S")));
  const auto n = need_int(m, "n");
  const auto dim = need_int(m, "dim");
  if (n < 0 || dim < 0) throw IoError("negative sizes in manifest");
  const auto un = static_cast<std::size_t>(n);
  ds.x = matrix_from(read_array<double>(dir / "x.f64", un * static_cast<std::size_t>(dim)), n, dim);
  auto y = read_array<std::int32_t>(dir / "y.i32", un);
  auto sev = read_array<std::int32_t>(dir / "severity.i32", un);
  ds.y.assign(y.begin(), y.end());
  ds.severity.assign(sev.begin(), sev.end());
  for (int s : ds.severity) {
    if (s < 0 || s > ds.dist.max_severity) throw IoError("severity index out of range in dataset");
  }
  return ds;
}

void save_source(const data::LabeledSource& source, const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<std::int32_t> y(source.y.begin(), source.y.end());
  write_file_atomic(dir / "x.f64", matrix_bytes(source.x));
  write_file_atomic(dir / "y.i32", as_bytes(y.data(), y.size()));
  Manifest m;
  m["n"] = std::to_string(source.size());
  m["dim"] = std::to_string(source.x.cols());
  m["classes"] = std::to_string(source.classes);
  write_manifest(dir / "manifest.txt", m);
}

data::LabeledSource load_source(const fs::path& dir) {
  const Manifest m = read_manifest(dir / "manifest.txt");
  const auto n = need_int(m, "n");
  const auto dim = need_int(m, "dim");
  if (n < 0 || dim < 0) throw IoError("negative sizes in manifest");
  data::LabeledSource src;
  src.classes = static_cast<int>(need_int(m, "classes"));
  const auto un = static_cast<std::size_t>(n);
  src.x = matrix_from(read_array<double>(dir / "x.f64", un * static_cast<std::size_t>(dim)), n, dim);
  auto y = read_array<std::int32_t>(dir / "y.i32", un);
  src.y.assign(y.begin(), y.end());
  for (int v : src.y) {
    if (v < 0 || v >= src.classes) throw IoError("label out of range in source");
  }
  return src;
}

}  // namespace shiftlab::io
