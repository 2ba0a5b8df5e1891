#include "shiftlab/rng.hpp"

namespace shiftlab {

std::uint64_t fnv1a64(std::string_view text) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t SeedSequence::seed(std::string_view name) const noexcept {
  return mix64(master_ ^ mix64(fnv1a64(name)));
}

std::uint64_t SeedSequence::seed(std::string_view name, std::uint64_t index) const noexcept {
  return mix64(seed(name) ^ mix64(index + 0x632be59bd9b4e019ULL));
}

SeedSequence seed_everything(std::uint64_t seed) { return SeedSequence(seed); }

}  // namespace shiftlab
