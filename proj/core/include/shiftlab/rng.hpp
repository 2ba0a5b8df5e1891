#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace shiftlab {

using Rng = std::mt19937_64;

/// Stable 64-bit FNV-1a hash; substream names must map to the same seed across
/// builds and versions.
std::uint64_t fnv1a64(std::string_view text) noexcept;

/// SplitMix64 finalizer, used to decorrelate derived seeds.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// Derives independent child seeds from one master seed.
///
/// Every stochastic component of a run draws from a named substream
/// ("data", "init", "train", "aug"), so changing how one component consumes
/// randomness never shifts another component's stream.
class SeedSequence {
 public:
  explicit SeedSequence(std::uint64_t master = 0) : master_(master) {}

  std::uint64_t master() const noexcept { return master_; }
  std::uint64_t seed(std::string_view name) const noexcept;
  std::uint64_t seed(std::string_view name, std::uint64_t index) const noexcept;
  Rng stream(std::string_view name) const { return Rng(seed(name)); }
  Rng stream(std::string_view name, std::uint64_t index) const { return Rng(seed(name, index)); }
  SeedSequence child(std::string_view name) const { return SeedSequence(seed(name)); }

 private:
  std::uint64_t master_;
};

namespace substream {
inline constexpr std::string_view kData = "data";
inline constexpr std::string_view kInit = "init";
inline constexpr std::string_view kTrain = "train";
inline constexpr std::string_view kAug = "aug";
}  // namespace substream

/// Returns the run-wide seed sequence for `seed`.
SeedSequence seed_everything(std::uint64_t seed);

}  // namespace shiftlab
