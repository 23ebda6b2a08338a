#pragma once

#include <map>
#include <string>

#include "lara/policy.hpp"

namespace lara {

// Training progress stored alongside the parameters.
struct TrainState {
  int stage = 0;  // last stage trained; 0 = freshly initialized
  bool stage_complete = false;
  int64_t step = 0;  // steps completed within the current stage
  int phase = 0;
  int64_t opt_t = 0;                       // optimizer timestep (bias correction)
  std::map<std::string, Tensor> opt_m;     // first moments, keyed by parameter name
  std::map<std::string, Tensor> opt_v;     // second moments
  std::string rng_state;                   // training stream, for bitwise resume
};

// Container: magic "LARA", u32 format version, u64 header length, JSON header
// (configs, vocab, normalization, named tensor table with byte offsets),
// little-endian float32 payload.
inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, Policy& policy, const TrainState& state);

struct LoadedCheckpoint {
  Policy policy;
  TrainState state;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace lara
