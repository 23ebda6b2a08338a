#include "lara/annotate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace lara::annotate {

const char* stage_kind_name(StageKind k) {
  switch (k) {
    case StageKind::kPreGrasp: return "pre_grasp";
    case StageKind::kGrasp: return "grasp";
    case StageKind::kMove: return "move";
    case StageKind::kRelease: return "release";
  }
  return "pre_grasp";
}

Segmentation segment_gripper_signal(std::span<const uint8_t> closed,
                                    std::span<const world::Vec2> positions) {
  const int n = static_cast<int>(closed.size());
  if (n < 2) throw std::invalid_argument("segment_gripper_signal: need at least 2 frames");
  if (!positions.empty() && static_cast<int>(positions.size()) != n) {
    throw std::invalid_argument("segment_gripper_signal: positions length mismatch");
  }

  // spans between toggles
  struct Span {
    int start, end;
    bool closed;
  };
  std::vector<Span> spans;
  int start = 0;
  for (int i = 1; i < n; ++i) {
    if ((closed[i] != 0) != (closed[i - 1] != 0)) {
      spans.push_back({start, i - 1, closed[i - 1] != 0});
      start = i;
    }
  }
  spans.push_back({start, n - 1, closed[n - 1] != 0});

  Segmentation out;
  bool seen_closed = false;
  for (const Span& span : spans) {
    if (!span.closed) {
      const StageKind kind = seen_closed ? StageKind::kRelease : StageKind::kPreGrasp;
      out.stages.push_back({kind, span.start, span.end, span.start, span.end});
      continue;
    }
    seen_closed = true;
    int move_start = -1;
    if (!positions.empty()) {
      const world::Vec2 grasp_point = positions[static_cast<size_t>(span.start)];
      for (int i = span.start; i <= span.end; ++i) {
        if (world::dist(positions[static_cast<size_t>(i)], grasp_point) > 0.05f) {
          move_start = i;
          break;
        }
      }
    }
    if (move_start > span.start) {
      out.stages.push_back(
          {StageKind::kGrasp, span.start, move_start - 1, span.start, move_start - 1});
      out.stages.push_back({StageKind::kMove, move_start, span.end, move_start, span.end});
    } else if (move_start == span.start) {
      out.stages.push_back({StageKind::kMove, span.start, span.end, span.start, span.end});
    } else {
      out.stages.push_back({StageKind::kGrasp, span.start, span.end, span.start, span.end});
    }
  }
  // a pick-place cycle ends open; ending closed leaves the cycle incomplete
  out.parity_warning = spans.back().closed;
  return out;
}

Segmentation segment_by_gripper(const world::Trajectory& traj) {
  std::vector<uint8_t> closed;
  std::vector<world::Vec2> positions;
  closed.reserve(traj.frames.size());
  positions.reserve(traj.frames.size());
  for (const world::Frame& f : traj.frames) {
    closed.push_back(f.gripper_closed ? 1 : 0);
    positions.push_back(f.ee);
  }
  return segment_gripper_signal(closed, positions);
}

std::string motion_descriptor(std::span<const world::Vec2> window, world::Vec2 goal,
                              std::optional<bool> closing_transition) {
  if (window.size() < 2) throw std::invalid_argument("motion_descriptor: window must have >= 2 frames");
  if (closing_transition.has_value()) {
    return *closing_transition ? "the robot is closing the gripper"
                               : "the robot is opening the gripper";
  }
  const world::Vec2 cur = window.back();
  const world::Vec2 prev = window[window.size() - 2];
  const float lx = cur.x - prev.x, ly = cur.y - prev.y;
  (void)goal;  // the global vector (goal - cur) informs segment goals; text uses local motion
  if (std::sqrt(lx * lx + ly * ly) <= 0.005f) return "hold position";

  static const char* kLabels[8] = {"move right",     "move up-right", "move up",
                                   "move up-left",   "move left",     "move down-left",
                                   "move down",      "move down-right"};
  const double angle = std::atan2(static_cast<double>(ly), static_cast<double>(lx));
  int sector = static_cast<int>(std::lround(angle / (M_PI / 4.0)));
  sector = ((sector % 8) + 8) % 8;
  return kLabels[sector];
}

std::string subtask_text(StageKind kind, const std::string& object_name,
                         const std::string& bin_name) {
  if (object_name.empty()) throw std::invalid_argument("subtask_text: empty object name");
  switch (kind) {
    case StageKind::kPreGrasp: return "reach toward the " + object_name;
    case StageKind::kGrasp: return "grasp the " + object_name;
    case StageKind::kMove: return "carry the " + object_name + " toward the " + bin_name;
    case StageKind::kRelease: return "place the " + object_name + " into the " + bin_name;
  }
  throw std::invalid_argument("subtask_text: unknown stage kind");
}

// ---- bbox track smoothing ----

BBoxTrack track_from_trajectory(const world::Trajectory& traj) {
  BBoxTrack track;
  track.boxes.reserve(traj.frames.size());
  track.confidence.assign(traj.frames.size(), 1.0f);
  for (const world::Frame& f : traj.frames) track.boxes.push_back(f.target_bbox);
  return track;
}

BBoxTrack inject_noise(const BBoxTrack& track, double fraction, double magnitude, Rng& rng) {
  BBoxTrack out = track;
  for (size_t i = 0; i < out.boxes.size(); ++i) {
    if (!out.boxes[i].has_value() || rng.uniform() >= fraction) continue;
    const double theta = rng.uniform(0.0, 2.0 * M_PI);
    const float ox = static_cast<float>(magnitude * std::cos(theta));
    const float oy = static_cast<float>(magnitude * std::sin(theta));
    world::BBox& b = *out.boxes[i];
    b.x_min += ox;
    b.x_max += ox;
    b.y_min += oy;
    b.y_max += oy;
    out.confidence[i] = static_cast<float>(1.0 - magnitude);
  }
  return out;
}

namespace {

world::Vec2 center_of(const world::BBox& b) {
  return {(b.x_min + b.x_max) * 0.5f, (b.y_min + b.y_max) * 0.5f};
}

float median(std::vector<float> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5f * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

BBoxTrack filter_outliers(const BBoxTrack& track) {
  int present = 0;
  for (const auto& b : track.boxes) present += b.has_value();
  if (present < 3) return track;  // too sparse to judge; caller sees it unchanged

  const int n = static_cast<int>(track.boxes.size());
  std::vector<bool> outlier(static_cast<size_t>(n), false);
  for (int i = 0; i < n; ++i) {
    if (!track.boxes[static_cast<size_t>(i)].has_value()) continue;
    std::vector<float> xs, ys;
    for (int j = std::max(0, i - 2); j <= std::min(n - 1, i + 2); ++j) {
      if (!track.boxes[static_cast<size_t>(j)].has_value()) continue;
      const world::Vec2 c = center_of(*track.boxes[static_cast<size_t>(j)]);
      xs.push_back(c.x);
      ys.push_back(c.y);
    }
    if (xs.size() < 2) continue;
    const world::Vec2 c = center_of(*track.boxes[static_cast<size_t>(i)]);
    const float dx = c.x - median(xs), dy = c.y - median(ys);
    if (std::sqrt(dx * dx + dy * dy) > 0.15f) outlier[static_cast<size_t>(i)] = true;
  }

  BBoxTrack out = track;
  for (int i = 0; i < n; ++i) {
    if (outlier[static_cast<size_t>(i)]) out.boxes[static_cast<size_t>(i)].reset();
  }
  return out;
}

BBoxTrack interpolate_gaps(const BBoxTrack& track) {
  const int n = static_cast<int>(track.boxes.size());
  std::vector<int> present;
  for (int i = 0; i < n; ++i) {
    if (track.boxes[static_cast<size_t>(i)].has_value()) present.push_back(i);
  }
  if (present.empty()) throw std::invalid_argument("interpolate_gaps: no boxes present");

  BBoxTrack out = track;
  auto lerp = [](const world::BBox& a, const world::BBox& b, float t) {
    return world::BBox{a.x_min + (b.x_min - a.x_min) * t, a.y_min + (b.y_min - a.y_min) * t,
                       a.x_max + (b.x_max - a.x_max) * t, a.y_max + (b.y_max - a.y_max) * t};
  };
  for (int i = 0; i < n; ++i) {
    if (out.boxes[static_cast<size_t>(i)].has_value()) continue;
    auto next = std::lower_bound(present.begin(), present.end(), i);
    if (next == present.begin()) {
      out.boxes[static_cast<size_t>(i)] = track.boxes[static_cast<size_t>(present.front())];
    } else if (next == present.end()) {
      out.boxes[static_cast<size_t>(i)] = track.boxes[static_cast<size_t>(present.back())];
    } else {
      const int hi = *next, lo = *(next - 1);
      const float t = static_cast<float>(i - lo) / static_cast<float>(hi - lo);
      out.boxes[static_cast<size_t>(i)] = lerp(*track.boxes[static_cast<size_t>(lo)],
                                               *track.boxes[static_cast<size_t>(hi)], t);
    }
  }
  return out;
}

// ---- CoT serialization ----

std::string format_bbox_text(const world::BBox& box) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "[%.4f %.4f %.4f %.4f]", box.x_min, box.y_min, box.x_max,
                box.y_max);
  return buf;
}

std::string serialize_cot(const CoTRecord& rec) {
  std::string out = rec.instruction + " @ Subtask: " + rec.subtask + ". BBox: " + rec.bbox_text +
                    ". Reasoning: " + rec.reasoning + ".";
  for (int i = 0; i < 16; ++i) out += " <img_next>";
  return out;
}

CoTRecord parse_cot(const std::string& text) {
  auto expect = [&](size_t pos, const char* what) {
    if (pos == std::string::npos) {
      throw std::invalid_argument(std::string("parse_cot: missing ") + what);
    }
    return pos;
  };
  const size_t at = expect(text.find(" @ Subtask: "), "'@ Subtask:' separator");
  const size_t bbox = expect(text.find(". BBox: ", at), "BBox clause");
  const size_t reason = expect(text.find(". Reasoning: ", bbox), "Reasoning clause");

  std::string tail = text.substr(reason + 13);
  const std::string placeholder = " <img_next>";
  for (int i = 0; i < 16; ++i) {
    if (tail.size() < placeholder.size() ||
        tail.compare(tail.size() - placeholder.size(), placeholder.size(), placeholder) != 0) {
      throw std::invalid_argument("parse_cot: expected 16 <img_next> placeholders");
    }
    tail.resize(tail.size() - placeholder.size());
  }
  if (tail.empty() || tail.back() != '.') {
    throw std::invalid_argument("parse_cot: missing terminal period");
  }
  tail.pop_back();

  CoTRecord rec;
  rec.instruction = text.substr(0, at);
  rec.subtask = text.substr(at + 12, bbox - (at + 12));
  rec.bbox_text = text.substr(bbox + 8, reason - (bbox + 8));
  rec.reasoning = std::move(tail);
  return rec;
}

// ---- per-frame annotation ----

std::vector<dataset::AnnotatedSample> annotate_trajectory(const world::Trajectory& traj,
                                                          const AnnotateOptions& opts,
                                                          Rng& noise_rng) {
  const int frames = static_cast<int>(traj.frames.size());
  if (frames < 2) throw std::invalid_argument("annotate_trajectory: trajectory too short");

  const Segmentation seg = segment_by_gripper(traj);

  BBoxTrack track = track_from_trajectory(traj);
  if (opts.inject_noise) {
    track = inject_noise(track, opts.noise_fraction, opts.noise_magnitude, noise_rng);
  }
  track = interpolate_gaps(filter_outliers(track));

  std::vector<dataset::AnnotatedSample> out;
  out.reserve(static_cast<size_t>(frames));
  const int actions = static_cast<int>(traj.actions.size());

  for (int t = 0; t < frames; ++t) {
    const Stage* stage = &seg.stages.front();
    for (const Stage& s : seg.stages) {
      if (t >= s.start && t <= s.end) {
        stage = &s;
        break;
      }
    }

    dataset::AnnotatedSample sample;
    sample.episode_id = traj.episode_id;
    sample.instruction = traj.task.instruction;
    sample.subtask = subtask_text(stage->kind, traj.target_name, traj.bin_name);
    sample.bbox_text = format_bbox_text(*track.boxes[static_cast<size_t>(t)]);

    if (t == 0) {
      sample.reasoning = "hold position";  // no motion observed yet
    } else {
      const int lo = std::max(0, t - 2);
      std::vector<world::Vec2> window;
      for (int i = lo; i <= t; ++i) window.push_back(traj.frames[static_cast<size_t>(i)].ee);
      std::optional<bool> transition;
      for (int i = t; i > lo; --i) {
        const bool cur = traj.frames[static_cast<size_t>(i)].gripper_closed;
        const bool prev = traj.frames[static_cast<size_t>(i - 1)].gripper_closed;
        if (cur != prev) {
          transition = cur;
          break;
        }
      }
      sample.reasoning = motion_descriptor(
          window, traj.frames[static_cast<size_t>(stage->end)].ee, transition);
    }

    sample.frame = t;
    sample.future_frame = std::min(t + opts.horizon, frames - 1);
    sample.action_chunk.resize(static_cast<size_t>(opts.horizon), {0.0f, 0.0f, 0.0f});
    sample.action_mask.assign(static_cast<size_t>(opts.horizon), 0);
    for (int k = 0; k < opts.horizon; ++k) {
      if (t + k < actions) {
        const world::Action& a = traj.actions[static_cast<size_t>(t + k)];
        sample.action_chunk[static_cast<size_t>(k)] = {a.dx, a.dy, a.gripper_cmd};
        sample.action_mask[static_cast<size_t>(k)] = 1;
      }
    }
    out.push_back(std::move(sample));
  }
  return out;
}

}  // namespace lara::annotate
