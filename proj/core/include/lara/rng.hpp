#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace lara {

// Deterministic random stream. Distributions are implemented by hand so the
// byte-for-byte output depends only on the seed, not on the standard library.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  // Named substream: all randomness in a run derives from one root seed
  // through (name, index) substreams.
  static Rng stream(uint64_t root_seed, std::string_view name, uint64_t index = 0);

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform();
  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Inclusive integer range.
  int64_t uniform_int(int64_t lo, int64_t hi);
  // Standard normal via Box-Muller (stateless: two draws per call).
  float normal();

  std::string save_state() const;
  void load_state(const std::string& text);

 private:
  std::mt19937_64 engine_;
};

uint64_t splitmix64(uint64_t x);

}  // namespace lara
