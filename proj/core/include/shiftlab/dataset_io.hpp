#pragma once

// On-disk layout of a corrupted dataset directory:
//
//   manifest.txt   key=value lines (format, kind, lambda, S, seed, n, dim,
//                  classes, count_<s>, weight_<s>, raw_<s>)
//   x.f64          n*dim little-endian IEEE-754 doubles, row-major
//   y.i32          n little-endian int32 labels
//   severity.i32   n little-endian int32 severity indices
//
// Every file is written to a temporary name and renamed into place.

#include "shiftlab/corruption_data.hpp"

#include <filesystem>
#include <map>
#include <string>

namespace shiftlab::io {

inline constexpr int kDatasetFormatVersion = 1;

using Manifest = std::map<std::string, std::string>;

Manifest read_manifest(const std::filesystem::path& file);
void write_manifest(const std::filesystem::path& file, const Manifest& manifest);

/// Writes `content` to `file` via a sibling temporary and an atomic rename.
void write_file_atomic(const std::filesystem::path& file, const std::string& content);

void save_dataset(const data::CorruptedDataset& dataset, const std::filesystem::path& dir);
data::CorruptedDataset load_dataset(const std::filesystem::path& dir);

/// User-supplied clean arrays: a directory with manifest.txt (n, dim,
/// classes), x.f64 and y.i32 in the same encoding as above.
data::LabeledSource load_source(const std::filesystem::path& dir);
void save_source(const data::LabeledSource& source, const std::filesystem::path& dir);

}  // namespace shiftlab::io
