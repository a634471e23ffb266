#pragma once

// Named random sub-streams derived from one run seed. Each consumer of
// randomness draws from its own engine so that adding draws in one stage
// never shifts the numbers seen by another.

#include <cstdint>
#include <random>
#include <string_view>

namespace photophys {

class SeedStreams {
 public:
  explicit SeedStreams(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::mt19937_64 engine(std::string_view name) const {
    const std::uint64_t h = fnv1a(name);
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
    return std::mt19937_64(seq);
  }

  /// Seed for a child run, e.g. the i-th power of a sweep.
  std::uint64_t child(std::string_view name) const {
    auto e = engine(name);
    return e();
  }

 private:
  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return h;
  }

  std::uint64_t seed_;
};

}  // namespace photophys
