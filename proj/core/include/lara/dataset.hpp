#pragma once

#include <array>
#include <string>
#include <vector>

#include "lara/worldsim.hpp"

namespace lara::dataset {

inline constexpr const char* kSchemaVersion = "v1";

// One CoT-annotated training sample; frames are referenced by index into the
// episode's trajectory so image payloads are stored once.
struct AnnotatedSample {
  std::string episode_id;
  std::string instruction;
  std::string subtask;
  std::string bbox_text;  // "[0.5664 0.5898 0.6953 0.6641]"
  std::string reasoning;
  int frame = 0;
  int future_frame = 0;
  std::vector<std::array<float, 3>> action_chunk;  // H x (dx, dy, grip)
  std::vector<uint8_t> action_mask;                // H, 0 marks padding
};

// Trajectory JSON Lines, one episode per line. Observation frames are
// base64-encoded little-endian float32 blobs with a declared shape.
void save_trajectories(const std::string& path, const std::vector<world::Trajectory>& episodes);
std::vector<world::Trajectory> load_trajectories(const std::string& path);

void save_annotations(const std::string& path, const std::vector<AnnotatedSample>& samples);
std::vector<AnnotatedSample> load_annotations(const std::string& path);

}  // namespace lara::dataset
