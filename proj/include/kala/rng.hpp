#pragma once

#include <cstdint>
#include <random>

namespace kala {

// Seeded RNG wrapper so every stochastic component draws from an explicit
// stream. Never use a global generator.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  double normal(double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> dist(mean, stddev);
    return dist(engine_);
  }

  double uniform(double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    return dist(engine_);
  }

  // Inclusive bounds.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    std::uniform_int_distribution<std::int64_t> dist(lo, hi);
    return dist(engine_);
  }

  bool bernoulli(double p) {
    std::bernoulli_distribution dist(p);
    return dist(engine_);
  }

  // Derive an independent child stream; deterministic in (seed, tag).
  Rng fork(std::uint64_t tag) const {
    return Rng(seed_ * 0x9e3779b97f4a7c15ULL + tag * 0xbf58476d1ce4e5b9ULL + 1ULL);
  }

  std::uint64_t seed() const { return seed_; }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace kala
