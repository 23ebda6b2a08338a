#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "lara/annotate.hpp"
#include "lara/worldsim.hpp"

using namespace lara;
using namespace lara::annotate;

namespace {

// Independent single-pass oracle: boundary set = indices where the gripper
// signal toggles.
std::vector<int> toggle_oracle(const std::vector<uint8_t>& grip) {
  std::vector<int> out;
  for (size_t i = 1; i < grip.size(); ++i) {
    if ((grip[i] != 0) != (grip[i - 1] != 0)) out.push_back(static_cast<int>(i));
  }
  return out;
}

std::vector<int> stage_starts(const Segmentation& seg) {
  std::vector<int> out;
  for (size_t i = 1; i < seg.stages.size(); ++i) out.push_back(seg.stages[i].start);
  return out;
}

world::BBox box_at(float cx, float cy) { return {cx - 0.05f, cy - 0.05f, cx + 0.05f, cy + 0.05f}; }

}  // namespace

TEST_CASE("segmentation boundaries sit exactly at gripper toggles") {
  std::vector<uint8_t> grip = {0, 0, 1, 1, 1, 0, 0};
  Segmentation seg = segment_gripper_signal(grip, {});
  REQUIRE(seg.stages.size() == 3);
  CHECK(seg.stages[0].kind == StageKind::kPreGrasp);
  CHECK(seg.stages[0].start == 0);
  CHECK(seg.stages[0].end == 1);
  CHECK(seg.stages[1].start == 2);
  CHECK(seg.stages[1].end == 4);
  CHECK(seg.stages[2].kind == StageKind::kRelease);
  CHECK(seg.stages[2].start == 5);
  CHECK(stage_starts(seg) == toggle_oracle(grip));
  CHECK_FALSE(seg.parity_warning);
}

TEST_CASE("all-open signal is a single pre_grasp stage") {
  std::vector<uint8_t> grip(6, 0);
  Segmentation seg = segment_gripper_signal(grip, {});
  REQUIRE(seg.stages.size() == 1);
  CHECK(seg.stages[0].kind == StageKind::kPreGrasp);
  CHECK(seg.stages[0].start == 0);
  CHECK(seg.stages[0].end == 5);
}

TEST_CASE("toggle every frame yields length-1 stages") {
  std::vector<uint8_t> grip = {0, 1, 0, 1, 0, 1};
  Segmentation seg = segment_gripper_signal(grip, {});
  CHECK(seg.stages.size() == 6);
  for (const Stage& s : seg.stages) CHECK(s.start == s.end);
  CHECK(stage_starts(seg) == toggle_oracle(grip));
  CHECK(seg.parity_warning);  // ends closed, mid-cycle
}

TEST_CASE("segmentation equals the toggle oracle on random signals") {
  Rng rng(41);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_int(0, 30));
    std::vector<uint8_t> grip(static_cast<size_t>(n));
    for (auto& g : grip) g = rng.uniform() < 0.5 ? 1 : 0;
    Segmentation seg = segment_gripper_signal(grip, {});
    CHECK(stage_starts(seg) == toggle_oracle(grip));
    // stages partition [0, n-1] with no gaps or overlaps
    int expected = 0;
    for (const Stage& s : seg.stages) {
      CHECK(s.start == expected);
      CHECK(s.end >= s.start);
      expected = s.end + 1;
    }
    CHECK(expected == n);
  }
}

TEST_CASE("move stage begins once the held object drifts 0.05 from the grasp point") {
  std::vector<uint8_t> grip = {0, 1, 1, 1, 1, 0};
  std::vector<world::Vec2> pos = {{0.2f, 0.2f}, {0.2f, 0.2f}, {0.22f, 0.2f},
                                  {0.30f, 0.2f}, {0.40f, 0.2f}, {0.40f, 0.2f}};
  Segmentation seg = segment_gripper_signal(grip, pos);
  REQUIRE(seg.stages.size() == 4);
  CHECK(seg.stages[0].kind == StageKind::kPreGrasp);
  CHECK(seg.stages[1].kind == StageKind::kGrasp);
  CHECK(seg.stages[1].start == 1);
  CHECK(seg.stages[1].end == 2);
  CHECK(seg.stages[2].kind == StageKind::kMove);
  CHECK(seg.stages[2].start == 3);  // |0.30 - 0.20| > 0.05
  CHECK(seg.stages[3].kind == StageKind::kRelease);
}

TEST_CASE("motion descriptor: transitions, compass labels, dead zone") {
  std::vector<world::Vec2> closing = {{0.1f, 0.1f}, {0.1f, 0.1f}};
  CHECK(motion_descriptor(closing, {0.5f, 0.5f}, true) == "the robot is closing the gripper");
  CHECK(motion_descriptor(closing, {0.5f, 0.5f}, false) == "the robot is opening the gripper");

  std::vector<world::Vec2> right = {{0.1f, 0.1f}, {0.13f, 0.1f}};
  CHECK(motion_descriptor(right, {0.9f, 0.1f}, std::nullopt) == "move right");

  std::vector<world::Vec2> still = {{0.1f, 0.1f}, {0.1f, 0.1f}};
  CHECK(motion_descriptor(still, {0.9f, 0.1f}, std::nullopt) == "hold position");
}

TEST_CASE("8-way labels match the sector oracle on random displacements") {
  static const char* kOracle[8] = {"move right",   "move up-right",  "move up",
                                   "move up-left", "move left",      "move down-left",
                                   "move down",    "move down-right"};
  Rng rng(43);
  int labeled = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const float dx = static_cast<float>(rng.uniform(-0.1, 0.1));
    const float dy = static_cast<float>(rng.uniform(-0.1, 0.1));
    std::vector<world::Vec2> window = {{0.5f, 0.5f}, {0.5f + dx, 0.5f + dy}};
    const std::string got = motion_descriptor(window, {0.5f, 0.5f}, std::nullopt);
    if (std::sqrt(dx * dx + dy * dy) <= 0.005f) {
      CHECK(got == "hold position");
      continue;
    }
    // independent oracle: sector = round(atan2 / 45 degrees) mod 8
    int sector =
        static_cast<int>(std::lround(std::atan2(dy, dx) * 4.0 / M_PI));
    sector = ((sector % 8) + 8) % 8;
    CHECK(got == kOracle[sector]);
    ++labeled;
  }
  CHECK(labeled > 9000);
}

TEST_CASE("subtask templates") {
  CHECK(subtask_text(StageKind::kMove, "potato", "bowl") == "carry the potato toward the bowl");
  CHECK(subtask_text(StageKind::kPreGrasp, "red circle", "") == "reach toward the red circle");
  CHECK(subtask_text(StageKind::kRelease, "blue square", "green bin") ==
        "place the blue square into the green bin");
  CHECK(subtask_text(StageKind::kGrasp, "red circle", "") == "grasp the red circle");
  CHECK_THROWS_AS(subtask_text(StageKind::kGrasp, "", ""), std::invalid_argument);
}

TEST_CASE("filter_outliers clears teleported boxes") {
  BBoxTrack track;
  for (int i = 0; i < 10; ++i) {
    track.boxes.push_back(box_at(0.3f, 0.3f));
    track.confidence.push_back(1.0f);
  }
  track.boxes[4] = box_at(0.8f, 0.8f);  // teleported by ~0.7
  BBoxTrack filtered = filter_outliers(track);
  CHECK_FALSE(filtered.boxes[4].has_value());
  for (int i : {0, 1, 2, 3, 5, 6, 7, 8, 9}) CHECK(filtered.boxes[static_cast<size_t>(i)].has_value());

  // clean track: unchanged
  BBoxTrack clean;
  for (int i = 0; i < 10; ++i) {
    clean.boxes.push_back(box_at(0.3f + 0.01f * i, 0.3f));
    clean.confidence.push_back(1.0f);
  }
  BBoxTrack same = filter_outliers(clean);
  for (int i = 0; i < 10; ++i) CHECK(same.boxes[static_cast<size_t>(i)].has_value());

  // two adjacent outliers both cleared
  BBoxTrack twin = track;
  twin.boxes[4] = box_at(0.9f, 0.9f);
  twin.boxes[5] = box_at(0.85f, 0.9f);
  BBoxTrack cleared = filter_outliers(twin);
  CHECK_FALSE(cleared.boxes[4].has_value());
  CHECK_FALSE(cleared.boxes[5].has_value());
}

TEST_CASE("interpolate_gaps fills linearly and clamps the ends") {
  BBoxTrack track;
  track.boxes.assign(5, std::nullopt);
  track.confidence.assign(5, 1.0f);
  track.boxes[0] = world::BBox{0.0f, 0.0f, 0.1f, 0.1f};
  track.boxes[4] = world::BBox{0.4f, 0.0f, 0.5f, 0.1f};
  BBoxTrack full = interpolate_gaps(track);
  REQUIRE(full.boxes[2].has_value());
  CHECK(full.boxes[2]->x_min == doctest::Approx(0.2));
  CHECK(full.boxes[1]->x_min == doctest::Approx(0.1));

  // no gaps: identity
  BBoxTrack dense;
  for (int i = 0; i < 4; ++i) {
    dense.boxes.push_back(box_at(0.2f + 0.05f * i, 0.5f));
    dense.confidence.push_back(1.0f);
  }
  BBoxTrack same = interpolate_gaps(dense);
  for (int i = 0; i < 4; ++i) CHECK(same.boxes[static_cast<size_t>(i)]->x_min == dense.boxes[static_cast<size_t>(i)]->x_min);

  // gaps at both ends clamp to the nearest present box
  BBoxTrack ends;
  ends.boxes.assign(5, std::nullopt);
  ends.confidence.assign(5, 1.0f);
  ends.boxes[2] = box_at(0.4f, 0.4f);
  BBoxTrack clamped = interpolate_gaps(ends);
  CHECK(clamped.boxes[0]->x_min == clamped.boxes[2]->x_min);
  CHECK(clamped.boxes[4]->x_min == clamped.boxes[2]->x_min);
}

TEST_CASE("filter then interpolate is idempotent on its own output") {
  Rng rng(47);
  for (int trial = 0; trial < 20; ++trial) {
    BBoxTrack track;
    const int n = 12 + static_cast<int>(rng.uniform_int(0, 10));
    for (int i = 0; i < n; ++i) {
      track.boxes.push_back(box_at(0.2f + 0.02f * i, 0.5f));
      track.confidence.push_back(1.0f);
    }
    Rng noise(trial);
    BBoxTrack noisy = inject_noise(track, 0.2, 0.3, noise);
    BBoxTrack once = interpolate_gaps(filter_outliers(noisy));
    BBoxTrack twice = interpolate_gaps(filter_outliers(once));
    REQUIRE(once.boxes.size() == twice.boxes.size());
    for (size_t i = 0; i < once.boxes.size(); ++i) {
      REQUIRE(twice.boxes[i].has_value());
      CHECK(twice.boxes[i]->x_min == doctest::Approx(once.boxes[i]->x_min).epsilon(1e-6));
      CHECK(twice.boxes[i]->y_max == doctest::Approx(once.boxes[i]->y_max).epsilon(1e-6));
    }
  }
}

TEST_CASE("noisy-bbox smoothing recovers ground truth within 0.05 on 95% of frames") {
  Rng rng(53);
  int total = 0, close = 0;
  auto demos = world::generate_demos(20, world::TaskFamily::kSingleObject, 4242);
  for (const auto& traj : demos) {
    BBoxTrack truth = track_from_trajectory(traj);
    BBoxTrack noisy = inject_noise(truth, 0.10, 0.30, rng);
    BBoxTrack smoothed = interpolate_gaps(filter_outliers(noisy));
    for (size_t i = 0; i < truth.boxes.size(); ++i) {
      const world::BBox& a = *truth.boxes[i];
      const world::BBox& b = *smoothed.boxes[i];
      const float err = std::max(std::max(std::abs(a.x_min - b.x_min), std::abs(a.y_min - b.y_min)),
                                 std::max(std::abs(a.x_max - b.x_max), std::abs(a.y_max - b.y_max)));
      ++total;
      if (err <= 0.05f) ++close;
    }
  }
  CHECK(static_cast<double>(close) / total >= 0.95);
}

TEST_CASE("CoT serialization round trip") {
  CoTRecord rec;
  rec.instruction = "put the red circle into the blue bin";
  rec.subtask = "carry the red circle toward the blue bin";
  rec.bbox_text = "[0.5664 0.5898 0.6953 0.6641]";
  rec.reasoning = "the robot is closing the gripper";
  const std::string text = serialize_cot(rec);
  CHECK(text.find("@ Subtask: carry the red circle toward the blue bin. BBox: [0.5664") !=
        std::string::npos);
  // exactly 16 placeholders
  size_t count = 0, pos = 0;
  while ((pos = text.find("<img_next>", pos)) != std::string::npos) {
    ++count;
    pos += 10;
  }
  CHECK(count == 16);

  CoTRecord back = parse_cot(text);
  CHECK(back.instruction == rec.instruction);
  CHECK(back.subtask == rec.subtask);
  CHECK(back.bbox_text == rec.bbox_text);
  CHECK(back.reasoning == rec.reasoning);
}

TEST_CASE("annotate_trajectory produces parseable per-frame samples") {
  auto demos = world::generate_demos(3, world::TaskFamily::kDistractor, 31);
  Rng noise(7);
  AnnotateOptions opts;
  for (const auto& traj : demos) {
    auto samples = annotate_trajectory(traj, opts, noise);
    CHECK(samples.size() == traj.frames.size());
    bool saw_closing = false;
    for (const auto& s : samples) {
      CoTRecord rec{s.instruction, s.subtask, s.bbox_text, s.reasoning};
      CoTRecord back = parse_cot(serialize_cot(rec));
      CHECK(back.subtask == s.subtask);
      CHECK(back.bbox_text == s.bbox_text);
      CHECK(back.reasoning == s.reasoning);
      if (s.reasoning == "the robot is closing the gripper") saw_closing = true;
      CHECK(s.future_frame == std::min(s.frame + opts.horizon,
                                       static_cast<int>(traj.frames.size()) - 1));
    }
    CHECK(saw_closing);  // every pick-place episode closes the gripper once

    // last frame: fully padded action chunk
    const auto& last = samples.back();
    CHECK(last.future_frame == static_cast<int>(traj.frames.size()) - 1);
    for (uint8_t m : last.action_mask) CHECK(m == 0);
    // frame just before the end: partially padded
    const auto& prev = samples[samples.size() - 2];
    CHECK(prev.action_mask[0] == 1);
    CHECK(prev.action_mask.back() == 0);
  }
}
