#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace taskfuse {

// FNV-1a, used to derive independent deterministic streams from a master
// seed plus a key (layer name, task index, element index, ...).
inline std::uint64_t hash_mix(std::uint64_t seed, std::string_view key) {
  std::uint64_t h = 14695981039346656037ull ^ seed;
  for (unsigned char c : key) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t hash_mix(std::uint64_t seed, std::uint64_t value) {
  std::uint64_t h = 14695981039346656037ull ^ seed;
  for (int i = 0; i < 8; ++i) {
    h ^= (value >> (8 * i)) & 0xff;
    h *= 1099511628211ull;
  }
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double normal() { return normal_(gen_); }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }
  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace taskfuse
