#include "lara/rng.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace lara {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

static uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

Rng Rng::stream(uint64_t root_seed, std::string_view name, uint64_t index) {
  uint64_t s = splitmix64(root_seed ^ fnv1a64(name));
  s = splitmix64(s ^ (0x517cc1b727220a95ull * (index + 1)));
  return Rng(s);
}

double Rng::uniform() {
  // 53 mantissa bits -> [0, 1)
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
  if (lo > hi) throw std::invalid_argument("Rng::uniform_int: empty range");
  uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  // Modulo bias is negligible for the small ranges used here but rejection
  // sampling keeps the stream exactly uniform.
  uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return lo + static_cast<int64_t>(x % span);
}

float Rng::normal() {
  // u1 in (0, 1] so the log is finite.
  double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  return static_cast<float>(z);
}

std::string Rng::save_state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::load_state(const std::string& text) {
  std::istringstream is(text);
  is >> engine_;
  if (!is) throw std::invalid_argument("Rng::load_state: malformed state string");
}

}  // namespace lara
