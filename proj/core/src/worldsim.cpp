#include "lara/worldsim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace lara::world {

namespace {

constexpr PaletteColor kPalette[kPaletteSize] = {
    {"red", 0.90f, 0.10f, 0.10f},    {"green", 0.10f, 0.80f, 0.15f},
    {"blue", 0.15f, 0.25f, 0.90f},   {"yellow", 0.95f, 0.85f, 0.10f},
    {"purple", 0.55f, 0.15f, 0.75f}, {"orange", 0.95f, 0.55f, 0.10f},
};

float clampf(float v, float lo, float hi) { return std::min(hi, std::max(lo, v)); }

}  // namespace

const PaletteColor& palette(int color) {
  if (color < 0 || color >= kPaletteSize) throw std::invalid_argument("palette: bad color id");
  return kPalette[color];
}

const char* shape_name(ObjShape s) {
  switch (s) {
    case ObjShape::kCircle: return "circle";
    case ObjShape::kSquare: return "square";
    case ObjShape::kTriangle: return "triangle";
  }
  return "circle";
}

const char* family_name(TaskFamily f) {
  switch (f) {
    case TaskFamily::kSingleObject: return "single_object";
    case TaskFamily::kDistractor: return "distractor";
    case TaskFamily::kTwoStepSort: return "two_step_sort";
  }
  return "single_object";
}

TaskFamily family_from_name(const std::string& name) {
  if (name == "single_object") return TaskFamily::kSingleObject;
  if (name == "distractor") return TaskFamily::kDistractor;
  if (name == "two_step_sort") return TaskFamily::kTwoStepSort;
  throw std::invalid_argument("unknown task family: " + name);
}

std::string object_display_name(const ObjectState& obj) {
  return std::string(palette(obj.color).name) + " " + shape_name(obj.shape);
}

std::string bin_display_name(const BinState& bin) {
  return std::string(palette(bin.color).name) + " bin";
}

// ---- rendering ----

namespace {

bool inside_object(const ObjectState& obj, float x, float y) {
  const float dx = x - obj.pos.x, dy = y - obj.pos.y;
  switch (obj.shape) {
    case ObjShape::kCircle:
      return dx * dx + dy * dy <= kObjectRadius * kObjectRadius;
    case ObjShape::kSquare:
      return std::abs(dx) <= kObjectRadius && std::abs(dy) <= kObjectRadius;
    case ObjShape::kTriangle: {
      // apex up: (0, r), (-0.866r, -0.5r), (0.866r, -0.5r)
      const float r = kObjectRadius;
      if (dy < -0.5f * r || dy > r) return false;
      const float half_width = 0.866f * r * (r - dy) / (1.5f * r);
      return std::abs(dx) <= half_width;
    }
  }
  return false;
}

struct Rgb {
  float r, g, b;
};

// Painter's order: bins (dimmed), objects, gripper crosshair on top.
std::optional<Rgb> sample_color(const WorldState& state, float x, float y) {
  std::optional<Rgb> out;
  for (const BinState& bin : state.bins) {
    const float dx = x - bin.pos.x, dy = y - bin.pos.y;
    if (dx * dx + dy * dy <= bin.radius * bin.radius) {
      const PaletteColor& c = palette(bin.color);
      out = Rgb{0.45f * c.r, 0.45f * c.g, 0.45f * c.b};
    }
  }
  for (const ObjectState& obj : state.objects) {
    if (inside_object(obj, x, y)) {
      const PaletteColor& c = palette(obj.color);
      out = Rgb{c.r, c.g, c.b};
    }
  }
  const GripperState& grip = state.gripper;
  const float gx = std::abs(x - grip.pos.x), gy = std::abs(y - grip.pos.y);
  const float arm = 0.05f, width = 0.012f;
  if ((gx <= width && gy <= arm) || (gy <= width && gx <= arm)) {
    out = grip.closed ? Rgb{0.0f, 1.0f, 1.0f} : Rgb{1.0f, 1.0f, 1.0f};
  }
  return out;
}

}  // namespace

Observation render(const WorldState& state) {
  Observation obs;
  obs.rgb.assign(static_cast<size_t>(kImageSize) * kImageSize * 3, 0.0f);
  constexpr int kSub = 4;  // 4x4 supersampling encodes subpixel position
  const float px = 1.0f / kImageSize;
  for (int row = 0; row < kImageSize; ++row) {
    for (int col = 0; col < kImageSize; ++col) {
      float r = 0, g = 0, b = 0;
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          const float x = (col + (sx + 0.5f) / kSub) * px;
          const float y = 1.0f - (row + (sy + 0.5f) / kSub) * px;
          if (auto c = sample_color(state, x, y)) {
            r += c->r;
            g += c->g;
            b += c->b;
          }
        }
      }
      const float inv = 1.0f / (kSub * kSub);
      float* dst = obs.rgb.data() + (static_cast<size_t>(row) * kImageSize + col) * 3;
      dst[0] = r * inv;
      dst[1] = g * inv;
      dst[2] = b * inv;
    }
  }
  return obs;
}

BBox ground_truth_bbox(const WorldState& state, int object_index) {
  if (object_index < 0 || object_index >= static_cast<int>(state.objects.size())) {
    throw std::invalid_argument("ground_truth_bbox: object index out of range");
  }
  const ObjectState& obj = state.objects[static_cast<size_t>(object_index)];
  const float r = kObjectRadius;
  BBox box{};
  switch (obj.shape) {
    case ObjShape::kCircle:
    case ObjShape::kSquare:
      box = {obj.pos.x - r, obj.pos.y - r, obj.pos.x + r, obj.pos.y + r};
      break;
    case ObjShape::kTriangle:
      box = {obj.pos.x - 0.866f * r, obj.pos.y - 0.5f * r, obj.pos.x + 0.866f * r, obj.pos.y + r};
      break;
  }
  box.x_min = clampf(box.x_min, 0.0f, 1.0f);
  box.y_min = clampf(box.y_min, 0.0f, 1.0f);
  box.x_max = clampf(box.x_max, 0.0f, 1.0f);
  box.y_max = clampf(box.y_max, 0.0f, 1.0f);
  return box;
}

// ---- dynamics ----

bool task_success(const WorldState& state, const TaskSpec& task) {
  const ObjectState& obj = state.objects[static_cast<size_t>(task.target_object)];
  const BinState& bin = state.bins[static_cast<size_t>(task.target_bin)];
  const bool held = state.gripper.held_object == task.target_object;
  return !held && dist(obj.pos, bin.pos) <= bin.radius;
}

bool terminal(const WorldState& state, const TaskSpec& task) {
  return task_success(state, task) || state.step_count >= kEpisodeCap;
}

StepResult step(const WorldState& state, const TaskSpec& task, const Action& action) {
  if (terminal(state, task)) {
    throw std::logic_error("step: state is terminal");
  }
  WorldState next = state;
  GripperState& grip = next.gripper;

  grip.pos.x = clampf(grip.pos.x + clampf(action.dx, -kDeltaMax, kDeltaMax), 0.0f, 1.0f);
  grip.pos.y = clampf(grip.pos.y + clampf(action.dy, -kDeltaMax, kDeltaMax), 0.0f, 1.0f);
  if (grip.held_object >= 0) {
    next.objects[static_cast<size_t>(grip.held_object)].pos = grip.pos;
  }

  if (action.gripper_cmd > 0.0f) {
    grip.closed = true;
    if (grip.held_object < 0) {
      int best = -1;
      float best_d = kGraspRadius;
      for (size_t i = 0; i < next.objects.size(); ++i) {
        const float d = dist(next.objects[i].pos, grip.pos);
        if (d <= best_d) {
          best_d = d;
          best = static_cast<int>(i);
        }
      }
      if (best >= 0) {
        grip.held_object = best;
        next.objects[static_cast<size_t>(best)].pos = grip.pos;
      }
    }
  } else if (action.gripper_cmd < 0.0f) {
    grip.closed = false;
    grip.held_object = -1;
  }

  next.step_count += 1;
  StepResult result;
  result.success = task_success(next, task);
  result.obs = render(next);
  result.state = std::move(next);
  return result;
}

// ---- scene generation ----

namespace {

Vec2 sample_position(Rng& rng) {
  return {static_cast<float>(rng.uniform(0.12, 0.88)),
          static_cast<float>(rng.uniform(0.12, 0.88))};
}

Vec2 place(Rng& rng, const std::vector<Vec2>& taken) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    Vec2 p = sample_position(rng);
    bool ok = true;
    for (Vec2 q : taken) {
      if (dist(p, q) < kMinSeparation) {
        ok = false;
        break;
      }
    }
    if (ok) return p;
  }
  throw std::runtime_error("reset: placement failed after 100 attempts");
}

}  // namespace

ResetResult reset(TaskFamily family, uint64_t seed) {
  Rng rng(splitmix64(seed ^ 0x77f0c1ull));
  WorldState state;
  std::vector<Vec2> taken;

  auto add_object = [&](ObjShape shape, int color) {
    Vec2 p = place(rng, taken);
    taken.push_back(p);
    state.objects.push_back({shape, color, p});
  };
  auto add_bin = [&](int color) {
    Vec2 p = place(rng, taken);
    taken.push_back(p);
    state.bins.push_back({color, p, kBinRadius});
  };
  auto random_shape = [&] { return static_cast<ObjShape>(rng.uniform_int(0, 2)); };
  auto random_color = [&] { return static_cast<int>(rng.uniform_int(0, kPaletteSize - 1)); };

  int target_object = 0, target_bin = 0;
  switch (family) {
    case TaskFamily::kSingleObject: {
      add_object(random_shape(), random_color());
      add_bin(random_color());
      break;
    }
    case TaskFamily::kDistractor: {
      const ObjShape ts = random_shape();
      const int tc = random_color();
      add_object(ts, tc);
      const int extras = static_cast<int>(rng.uniform_int(1, 2));
      for (int i = 0; i < extras; ++i) {
        // distinct (color, shape) so the instruction stays unambiguous
        ObjShape s;
        int c;
        do {
          s = random_shape();
          c = random_color();
          bool clash = false;
          for (const ObjectState& o : state.objects) {
            if (o.shape == s && o.color == c) clash = true;
          }
          if (!clash) break;
        } while (true);
        add_object(s, c);
      }
      add_bin(random_color());
      if (rng.uniform() < 0.5) {
        int c;
        do {
          c = random_color();
        } while (c == state.bins[0].color);
        add_bin(c);
      }
      break;
    }
    case TaskFamily::kTwoStepSort: {
      const int c0 = random_color();
      int c1;
      do {
        c1 = random_color();
      } while (c1 == c0);
      const ObjShape s0 = random_shape();
      ObjShape s1;
      do {
        s1 = random_shape();
      } while (s1 == s0 && c1 == c0);
      add_object(s0, c0);
      add_object(s1, c1);
      add_bin(c0);
      add_bin(c1);
      target_object = 0;
      target_bin = 0;  // color-matched bin of object 0
      break;
    }
  }

  state.gripper.pos = place(rng, taken);
  state.gripper.closed = false;
  state.gripper.held_object = -1;

  TaskSpec task;
  task.target_object = target_object;
  task.target_bin = target_bin;
  const ObjectState& obj = state.objects[static_cast<size_t>(target_object)];
  const BinState& bin = state.bins[static_cast<size_t>(target_bin)];
  task.instruction = "put the " + object_display_name(obj) + " into the " + bin_display_name(bin);

  ResetResult result;
  result.obs = render(state);
  result.state = std::move(state);
  result.task = std::move(task);
  return result;
}

// ---- expert ----

Action scripted_expert(const WorldState& state, const TaskSpec& task) {
  if (task.target_object < 0 ||
      task.target_object >= static_cast<int>(state.objects.size()) || task.target_bin < 0 ||
      task.target_bin >= static_cast<int>(state.bins.size())) {
    throw std::runtime_error("scripted_expert: task references missing entities");
  }
  const GripperState& grip = state.gripper;
  const ObjectState& obj = state.objects[static_cast<size_t>(task.target_object)];
  const BinState& bin = state.bins[static_cast<size_t>(task.target_bin)];

  auto toward = [&](Vec2 goal, float hold_cmd) {
    Action a;
    a.dx = clampf(goal.x - grip.pos.x, -kDeltaMax, kDeltaMax);
    a.dy = clampf(goal.y - grip.pos.y, -kDeltaMax, kDeltaMax);
    a.gripper_cmd = hold_cmd;
    return a;
  };

  if (grip.held_object == task.target_object) {
    if (dist(grip.pos, bin.pos) <= 0.04f) return Action{0.0f, 0.0f, -1.0f};  // release
    return toward(bin.pos, 1.0f);  // carry, keep closed
  }
  if (grip.held_object >= 0) return Action{0.0f, 0.0f, -1.0f};  // drop wrong object
  if (dist(grip.pos, obj.pos) <= 0.035f) return Action{0.0f, 0.0f, 1.0f};  // grasp
  return toward(obj.pos, -1.0f);  // approach, keep open
}

// ---- demonstrations ----

std::vector<Trajectory> generate_demos(int n, TaskFamily family, uint64_t seed) {
  if (n < 1) throw std::invalid_argument("generate_demos: n must be >= 1");
  std::vector<Trajectory> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const uint64_t episode_seed = splitmix64(seed) + static_cast<uint64_t>(i);
    ResetResult r = reset(family, episode_seed);

    Trajectory traj;
    traj.episode_id =
        std::string(family_name(family)) + "-" + std::to_string(episode_seed);
    traj.family = family;
    traj.seed = episode_seed;
    traj.task = r.task;
    traj.initial_state = r.state;
    const ObjectState& target = r.state.objects[static_cast<size_t>(r.task.target_object)];
    const BinState& bin = r.state.bins[static_cast<size_t>(r.task.target_bin)];
    traj.target_name = object_display_name(target);
    traj.bin_name = bin_display_name(bin);

    WorldState state = r.state;
    Observation obs = std::move(r.obs);
    bool success = false;
    for (int t = 0; t < kExpertStepBound && !success; ++t) {
      const Action action = scripted_expert(state, traj.task);
      traj.frames.push_back({std::move(obs), state.gripper.pos, state.gripper.closed,
                             ground_truth_bbox(state, traj.task.target_object)});
      traj.actions.push_back(action);
      StepResult s = step(state, traj.task, action);
      state = std::move(s.state);
      obs = std::move(s.obs);
      success = s.success;
    }
    if (!success) {
      throw std::runtime_error("generate_demos: expert failed on seed " +
                               std::to_string(episode_seed));
    }
    traj.frames.push_back({std::move(obs), state.gripper.pos, state.gripper.closed,
                           ground_truth_bbox(state, traj.task.target_object)});
    out.push_back(std::move(traj));
  }
  return out;
}

}  // namespace lara::world
