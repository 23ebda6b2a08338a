#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "lara/dataset.hpp"
#include "lara/worldsim.hpp"

using namespace lara;
using namespace lara::world;

TEST_CASE("reset is deterministic per seed") {
  for (uint64_t seed : {0ull, 3ull, 19ull}) {
    ResetResult a = reset(TaskFamily::kDistractor, seed);
    ResetResult b = reset(TaskFamily::kDistractor, seed);
    REQUIRE(a.state.objects.size() == b.state.objects.size());
    for (size_t i = 0; i < a.state.objects.size(); ++i) {
      CHECK(a.state.objects[i].pos.x == b.state.objects[i].pos.x);
      CHECK(a.state.objects[i].pos.y == b.state.objects[i].pos.y);
    }
    CHECK(a.task.instruction == b.task.instruction);
    CHECK(a.obs.rgb == b.obs.rgb);
  }
}

TEST_CASE("single-object family has exactly one object and one bin") {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    ResetResult r = reset(TaskFamily::kSingleObject, seed);
    CHECK(r.state.objects.size() == 1);
    CHECK(r.state.bins.size() == 1);
  }
}

TEST_CASE("distractor seed 7 matches the frozen golden snapshot") {
  ResetResult r = reset(TaskFamily::kDistractor, 7);
  REQUIRE(r.state.objects.size() == 2);
  REQUIRE(r.state.bins.size() == 2);
  CHECK(r.state.objects[0].shape == ObjShape::kTriangle);
  CHECK(r.state.objects[0].color == 0);  // red
  CHECK(r.state.objects[0].pos.x == doctest::Approx(0.593109).epsilon(1e-5));
  CHECK(r.state.objects[0].pos.y == doctest::Approx(0.525462).epsilon(1e-5));
  CHECK(r.state.objects[1].pos.x == doctest::Approx(0.424367).epsilon(1e-5));
  CHECK(r.state.objects[1].pos.y == doctest::Approx(0.560327).epsilon(1e-5));
  CHECK(r.state.bins[0].pos.x == doctest::Approx(0.360217).epsilon(1e-5));
  CHECK(r.state.bins[0].pos.y == doctest::Approx(0.376349).epsilon(1e-5));
  CHECK(r.state.gripper.pos.x == doctest::Approx(0.706259).epsilon(1e-5));
  CHECK(r.task.instruction == "put the red triangle into the red bin");
}

TEST_CASE("no initial overlaps") {
  for (uint64_t seed = 0; seed < 50; ++seed) {
    ResetResult r = reset(TaskFamily::kTwoStepSort, seed);
    std::vector<Vec2> points;
    for (const auto& o : r.state.objects) points.push_back(o.pos);
    for (const auto& b : r.state.bins) points.push_back(b.pos);
    points.push_back(r.state.gripper.pos);
    for (size_t i = 0; i < points.size(); ++i) {
      for (size_t j = i + 1; j < points.size(); ++j) {
        CHECK(dist(points[i], points[j]) >= kMinSeparation);
      }
    }
  }
}

TEST_CASE("zero action leaves poses unchanged") {
  ResetResult r = reset(TaskFamily::kSingleObject, 5);
  StepResult s = step(r.state, r.task, Action{0, 0, 0});
  CHECK(s.state.gripper.pos.x == r.state.gripper.pos.x);
  CHECK(s.state.gripper.pos.y == r.state.gripper.pos.y);
  CHECK(s.state.objects[0].pos.x == r.state.objects[0].pos.x);
  CHECK(s.state.gripper.closed == r.state.gripper.closed);
  CHECK(s.state.step_count == r.state.step_count + 1);
}

TEST_CASE("closing within the grasp radius grabs the object") {
  ResetResult r = reset(TaskFamily::kSingleObject, 5);
  WorldState state = r.state;
  state.gripper.pos = {state.objects[0].pos.x + 0.04f, state.objects[0].pos.y};
  StepResult s = step(state, r.task, Action{0, 0, 1.0f});
  CHECK(s.state.gripper.held_object == 0);
  CHECK(s.state.objects[0].pos.x == s.state.gripper.pos.x);

  // beyond the radius: nothing grabbed
  state.gripper.pos = {state.objects[0].pos.x + 0.06f, state.objects[0].pos.y};
  StepResult miss = step(state, r.task, Action{0, 0, 1.0f});
  CHECK(miss.state.gripper.held_object == -1);
  CHECK(miss.state.gripper.closed);
}

TEST_CASE("positions stay in the unit square under any action sequence") {
  ResetResult r = reset(TaskFamily::kSingleObject, 9);
  WorldState state = r.state;
  Rng rng(123);
  for (int t = 0; t < 80; ++t) {
    Action a{static_cast<float>(rng.uniform(-0.5, 0.5)),
             static_cast<float>(rng.uniform(-0.5, 0.5)),
             static_cast<float>(rng.uniform(-1.0, 1.0))};
    if (terminal(state, r.task)) break;
    state = step(state, r.task, a).state;
    CHECK(state.gripper.pos.x >= 0.0f);
    CHECK(state.gripper.pos.x <= 1.0f);
    for (const auto& o : state.objects) {
      CHECK(o.pos.x >= 0.0f);
      CHECK(o.pos.y <= 1.0f);
    }
  }
}

TEST_CASE("expert phase logic") {
  ResetResult r = reset(TaskFamily::kSingleObject, 21);
  WorldState state = r.state;

  // atop the object with an open gripper: close
  state.gripper.pos = state.objects[0].pos;
  Action a = scripted_expert(state, r.task);
  CHECK(a.gripper_cmd > 0.0f);

  // holding, bin to the right: dx > 0, dy ~ 0
  state.gripper.pos = {0.2f, state.bins[0].pos.y};
  state.bins[0].pos.x = 0.8f;
  state.gripper.closed = true;
  state.gripper.held_object = 0;
  state.objects[0].pos = state.gripper.pos;
  a = scripted_expert(state, r.task);
  CHECK(a.dx > 0.0f);
  CHECK(a.dy == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("scripted expert succeeds on 100 seeds within the step bound") {
  for (int family = 0; family < 3; ++family) {
    const int n = family == 0 ? 100 : 30;
    for (int seed = 0; seed < n; ++seed) {
      ResetResult r = reset(static_cast<TaskFamily>(family), static_cast<uint64_t>(seed) + 1000);
      WorldState state = r.state;
      bool done = false;
      for (int t = 0; t < kExpertStepBound && !done; ++t) {
        StepResult s = step(state, r.task, scripted_expert(state, r.task));
        state = s.state;
        done = s.success;
      }
      CHECK_MESSAGE(done, "family=", family, " seed=", seed);
    }
  }
}

TEST_CASE("ground_truth_bbox geometry") {
  WorldState state;
  state.objects.push_back({ObjShape::kCircle, 0, {0.5f, 0.5f}});
  state.bins.push_back({1, {0.2f, 0.2f}, kBinRadius});
  BBox box = ground_truth_bbox(state, 0);
  CHECK(box.x_min == doctest::Approx(0.45));
  CHECK(box.y_min == doctest::Approx(0.45));
  CHECK(box.x_max == doctest::Approx(0.55));
  CHECK(box.y_max == doctest::Approx(0.55));

  CHECK_THROWS_AS(ground_truth_bbox(state, 2), std::invalid_argument);

  // box always contains the object center
  Rng rng(31);
  for (int i = 0; i < 50; ++i) {
    state.objects[0].shape = static_cast<ObjShape>(rng.uniform_int(0, 2));
    state.objects[0].pos = {static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform())};
    BBox b = ground_truth_bbox(state, 0);
    CHECK(b.x_min <= state.objects[0].pos.x);
    CHECK(b.x_max >= state.objects[0].pos.x);
    CHECK(b.y_min <= state.objects[0].pos.y);
    CHECK(b.y_max >= state.objects[0].pos.y);
  }
}

TEST_CASE("render is a pure function of state") {
  ResetResult r = reset(TaskFamily::kDistractor, 13);
  Observation a = render(r.state);
  Observation b = render(r.state);
  CHECK(a.rgb == b.rgb);
}

TEST_CASE("generate_demos: deterministic, successful, bounded") {
  auto demos = generate_demos(3, TaskFamily::kSingleObject, 77);
  auto again = generate_demos(3, TaskFamily::kSingleObject, 77);
  REQUIRE(demos.size() == 3);
  for (size_t i = 0; i < demos.size(); ++i) {
    CHECK(demos[i].actions.size() <= kExpertStepBound);
    CHECK(demos[i].frames.size() == demos[i].actions.size() + 1);
    CHECK(demos[i].episode_id == again[i].episode_id);
    CHECK(demos[i].frames.back().obs.rgb == again[i].frames.back().obs.rgb);
  }
}

TEST_CASE("demonstrations replay bitwise from the recorded initial state") {
  auto demos = generate_demos(2, TaskFamily::kDistractor, 99);
  for (const Trajectory& traj : demos) {
    WorldState state = traj.initial_state;
    Observation obs = render(state);
    CHECK(obs.rgb == traj.frames[0].obs.rgb);
    for (size_t t = 0; t < traj.actions.size(); ++t) {
      StepResult s = step(state, traj.task, traj.actions[t]);
      state = s.state;
      CHECK(s.obs.rgb == traj.frames[t + 1].obs.rgb);
    }
  }
}

TEST_CASE("trajectory JSONL round trip") {
  auto demos = generate_demos(2, TaskFamily::kSingleObject, 5);
  const std::string path = "test_traj_roundtrip.jsonl";
  dataset::save_trajectories(path, demos);
  auto loaded = dataset::load_trajectories(path);
  REQUIRE(loaded.size() == demos.size());
  for (size_t i = 0; i < demos.size(); ++i) {
    CHECK(loaded[i].episode_id == demos[i].episode_id);
    CHECK(loaded[i].task.instruction == demos[i].task.instruction);
    REQUIRE(loaded[i].frames.size() == demos[i].frames.size());
    CHECK(loaded[i].frames[0].obs.rgb == demos[i].frames[0].obs.rgb);
    CHECK(loaded[i].actions.size() == demos[i].actions.size());
  }
  std::filesystem::remove(path);
}
