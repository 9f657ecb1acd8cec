#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace amg {

using real = float;

// Invalid input (bad file, bad config, violated precondition). CLI exit code 2.
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Failure during execution (shape mismatch, non-finite gradient, ...). CLI exit code 3.
struct RuntimeError : std::runtime_error {
  explicit RuntimeError(const std::string& msg) : std::runtime_error(msg) {}
};

// splitmix64, used to derive per-example RNG streams from (seed, example id)
// so corruption is schedule-independent.
inline std::uint64_t split_mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return split_mix(seed ^ split_mix(stream + 0x51eadbeefULL));
}

}  // namespace amg
