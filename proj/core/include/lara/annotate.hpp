#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lara/dataset.hpp"
#include "lara/rng.hpp"
#include "lara/worldsim.hpp"

namespace lara::annotate {

enum class StageKind { kPreGrasp, kGrasp, kMove, kRelease };
const char* stage_kind_name(StageKind k);

struct Stage {
  StageKind kind;
  int start = 0;  // inclusive
  int end = 0;    // inclusive
  int key_start = 0;
  int key_end = 0;
};

struct Segmentation {
  std::vector<Stage> stages;
  bool parity_warning = false;  // trajectory ends mid-cycle
};

// Stage boundaries sit exactly at gripper toggles; each closed span splits
// into grasp/move once the held point drifts more than 0.05 from the grasp
// point. Positions may be empty, in which case no grasp/move split happens.
Segmentation segment_gripper_signal(std::span<const uint8_t> closed,
                                    std::span<const world::Vec2> positions);
Segmentation segment_by_gripper(const world::Trajectory& traj);

// Transition text wins over motion; otherwise the last displacement maps to
// an 8-way compass label (45-degree sectors, 0.005 dead zone).
std::string motion_descriptor(std::span<const world::Vec2> window, world::Vec2 goal,
                              std::optional<bool> closing_transition);

std::string subtask_text(StageKind kind, const std::string& object_name,
                         const std::string& bin_name);

struct BBoxTrack {
  std::vector<std::optional<world::BBox>> boxes;
  std::vector<float> confidence;  // in [0,1]
};

BBoxTrack track_from_trajectory(const world::Trajectory& traj);
// Perturbs a fraction of frames by `magnitude` in a random direction and
// lowers their confidence to 1 - magnitude; exercises the smoothing path.
BBoxTrack inject_noise(const BBoxTrack& track, double fraction, double magnitude, Rng& rng);
// Clears boxes whose center strays > 0.15 from the median of the +/-2-frame
// neighborhood. Returns the input unchanged when fewer than 3 boxes exist.
BBoxTrack filter_outliers(const BBoxTrack& track);
// Linear interpolation over absent frames; clamp-extends at the ends.
BBoxTrack interpolate_gaps(const BBoxTrack& track);

struct CoTRecord {
  std::string instruction;
  std::string subtask;
  std::string bbox_text;
  std::string reasoning;
};

// Grammar: "{instruction} @ Subtask: {subtask}. BBox: [..]. Reasoning: {r}."
// followed by 16 <img_next> placeholders.
std::string serialize_cot(const CoTRecord& rec);
CoTRecord parse_cot(const std::string& text);
std::string format_bbox_text(const world::BBox& box);  // 4-decimal, space-separated

struct AnnotateOptions {
  int horizon = 8;
  double noise_fraction = 0.10;
  double noise_magnitude = 0.30;
  bool inject_noise = true;
};

std::vector<dataset::AnnotatedSample> annotate_trajectory(const world::Trajectory& traj,
                                                          const AnnotateOptions& opts,
                                                          Rng& noise_rng);

}  // namespace lara::annotate
