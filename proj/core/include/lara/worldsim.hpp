#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lara/rng.hpp"

namespace lara::world {

struct Vec2 {
  float x = 0.0f;
  float y = 0.0f;
};

inline float dist(Vec2 a, Vec2 b) {
  const float dx = a.x - b.x, dy = a.y - b.y;
  return std::sqrt(dx * dx + dy * dy);
}

enum class ObjShape { kCircle, kSquare, kTriangle };
enum class TaskFamily { kSingleObject, kDistractor, kTwoStepSort };

const char* shape_name(ObjShape s);
const char* family_name(TaskFamily f);
TaskFamily family_from_name(const std::string& name);

// Palette index doubles as the color id for objects and bins.
struct PaletteColor {
  const char* name;
  float r, g, b;
};
inline constexpr int kPaletteSize = 6;
const PaletteColor& palette(int color);

inline constexpr float kObjectRadius = 0.05f;
inline constexpr float kBinRadius = 0.08f;
inline constexpr float kGraspRadius = 0.05f;
inline constexpr float kDeltaMax = 0.1f;
inline constexpr float kMinSeparation = 0.15f;
inline constexpr int kEpisodeCap = 120;
inline constexpr int kExpertStepBound = 60;
inline constexpr int kImageSize = 24;

struct ObjectState {
  ObjShape shape;
  int color;
  Vec2 pos;
};

struct BinState {
  int color;
  Vec2 pos;
  float radius = kBinRadius;
};

struct GripperState {
  Vec2 pos;
  bool closed = false;
  int held_object = -1;
};

struct WorldState {
  std::vector<ObjectState> objects;
  std::vector<BinState> bins;
  GripperState gripper;
  int step_count = 0;
};

struct Action {
  float dx = 0.0f;
  float dy = 0.0f;
  float gripper_cmd = 0.0f;  // >0 close, <0 open, otherwise no change
};

// Top-down 24x24x3 rendering, values in [0,1], row 0 at y=1.
struct Observation {
  std::vector<float> rgb;  // [H][W][3]
  float at(int row, int col, int ch) const {
    return rgb[(static_cast<size_t>(row) * kImageSize + col) * 3 + ch];
  }
};

struct TaskSpec {
  std::string instruction;
  int target_object = 0;
  int target_bin = 0;
};

struct BBox {
  float x_min, y_min, x_max, y_max;
};

Observation render(const WorldState& state);
BBox ground_truth_bbox(const WorldState& state, int object_index);

// Success: target object released inside the target bin.
bool task_success(const WorldState& state, const TaskSpec& task);
bool terminal(const WorldState& state, const TaskSpec& task);

struct ResetResult {
  WorldState state;
  TaskSpec task;
  Observation obs;
};
// Deterministic per (family, seed). Throws on placement failure.
ResetResult reset(TaskFamily family, uint64_t seed);

struct StepResult {
  WorldState state;
  Observation obs;
  bool success = false;
};
StepResult step(const WorldState& state, const TaskSpec& task, const Action& action);

Action scripted_expert(const WorldState& state, const TaskSpec& task);

// One recorded demonstration. frames.size() == actions.size() + 1.
struct Frame {
  Observation obs;
  Vec2 ee;
  bool gripper_closed = false;
  BBox target_bbox{};
};

struct Trajectory {
  std::string episode_id;
  TaskFamily family = TaskFamily::kSingleObject;
  uint64_t seed = 0;
  TaskSpec task;
  std::string target_name;  // "red circle"
  std::string bin_name;     // "blue bin"
  WorldState initial_state;
  std::vector<Frame> frames;
  std::vector<Action> actions;
};

// Scripted-expert rollouts; every trajectory ends in success or the
// offending seed is reported.
std::vector<Trajectory> generate_demos(int n, TaskFamily family, uint64_t seed);

std::string object_display_name(const ObjectState& obj);
std::string bin_display_name(const BinState& bin);

}  // namespace lara::world
