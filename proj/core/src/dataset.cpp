#include "lara/dataset.hpp"

#include <fstream>

#include <json.hpp>

#include "lara/base64.hpp"
#include "lara/error.hpp"

namespace lara::dataset {

using nlohmann::json;

namespace {

json vec2_json(world::Vec2 v) { return json::array({v.x, v.y}); }
world::Vec2 vec2_from(const json& j) { return {j.at(0).get<float>(), j.at(1).get<float>()}; }

json bbox_json(const world::BBox& b) { return json::array({b.x_min, b.y_min, b.x_max, b.y_max}); }
world::BBox bbox_from(const json& j) {
  return {j.at(0).get<float>(), j.at(1).get<float>(), j.at(2).get<float>(), j.at(3).get<float>()};
}

json state_json(const world::WorldState& s) {
  json objects = json::array();
  for (const auto& o : s.objects) {
    objects.push_back({{"shape", world::shape_name(o.shape)},
                       {"color", world::palette(o.color).name},
                       {"pos", vec2_json(o.pos)}});
  }
  json bins = json::array();
  for (const auto& b : s.bins) {
    bins.push_back(
        {{"color", world::palette(b.color).name}, {"pos", vec2_json(b.pos)}, {"radius", b.radius}});
  }
  return {{"objects", objects},
          {"bins", bins},
          {"gripper",
           {{"pos", vec2_json(s.gripper.pos)},
            {"closed", s.gripper.closed},
            {"held_object", s.gripper.held_object}}},
          {"step_count", s.step_count}};
}

int color_id(const std::string& name) {
  for (int i = 0; i < world::kPaletteSize; ++i) {
    if (name == world::palette(i).name) return i;
  }
  throw ValidationError("unknown color name: " + name);
}

world::ObjShape shape_id(const std::string& name) {
  if (name == "circle") return world::ObjShape::kCircle;
  if (name == "square") return world::ObjShape::kSquare;
  if (name == "triangle") return world::ObjShape::kTriangle;
  throw ValidationError("unknown shape name: " + name);
}

world::WorldState state_from(const json& j) {
  world::WorldState s;
  for (const auto& o : j.at("objects")) {
    s.objects.push_back({shape_id(o.at("shape").get<std::string>()),
                         color_id(o.at("color").get<std::string>()), vec2_from(o.at("pos"))});
  }
  for (const auto& b : j.at("bins")) {
    s.bins.push_back({color_id(b.at("color").get<std::string>()), vec2_from(b.at("pos")),
                      b.at("radius").get<float>()});
  }
  const json& g = j.at("gripper");
  s.gripper.pos = vec2_from(g.at("pos"));
  s.gripper.closed = g.at("closed").get<bool>();
  s.gripper.held_object = g.at("held_object").get<int>();
  s.step_count = j.at("step_count").get<int>();
  return s;
}

}  // namespace

void save_trajectories(const std::string& path, const std::vector<world::Trajectory>& episodes) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (const world::Trajectory& traj : episodes) {
    json frames = json::array();
    for (const world::Frame& f : traj.frames) {
      frames.push_back({{"obs",
                         {{"shape", {world::kImageSize, world::kImageSize, 3}},
                          {"dtype", "f32"},
                          {"data", encode_f32_blob(f.obs.rgb)}}},
                        {"ee", vec2_json(f.ee)},
                        {"grip", f.gripper_closed},
                        {"bbox", bbox_json(f.target_bbox)}});
    }
    json actions = json::array();
    for (const world::Action& a : traj.actions) {
      actions.push_back(json::array({a.dx, a.dy, a.gripper_cmd}));
    }
    json line = {{"schema", kSchemaVersion},
                 {"episode_id", traj.episode_id},
                 {"family", world::family_name(traj.family)},
                 {"seed", traj.seed},
                 {"instruction", traj.task.instruction},
                 {"target_object", traj.task.target_object},
                 {"target_bin", traj.task.target_bin},
                 {"target_name", traj.target_name},
                 {"bin_name", traj.bin_name},
                 {"init_state", state_json(traj.initial_state)},
                 {"frames", frames},
                 {"actions", actions}};
    out << line.dump() << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

std::vector<world::Trajectory> load_trajectories(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  std::vector<world::Trajectory> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
      if (j.at("schema").get<std::string>() != kSchemaVersion) {
        throw ValidationError("unsupported schema version");
      }
      world::Trajectory traj;
      traj.episode_id = j.at("episode_id").get<std::string>();
      traj.family = world::family_from_name(j.at("family").get<std::string>());
      traj.seed = j.at("seed").get<uint64_t>();
      traj.task.instruction = j.at("instruction").get<std::string>();
      traj.task.target_object = j.at("target_object").get<int>();
      traj.task.target_bin = j.at("target_bin").get<int>();
      traj.target_name = j.at("target_name").get<std::string>();
      traj.bin_name = j.at("bin_name").get<std::string>();
      traj.initial_state = state_from(j.at("init_state"));
      for (const auto& f : j.at("frames")) {
        world::Frame frame;
        const auto& obs = f.at("obs");
        const auto shape = obs.at("shape");
        if (shape.at(0).get<int>() != world::kImageSize ||
            shape.at(1).get<int>() != world::kImageSize || shape.at(2).get<int>() != 3) {
          throw ValidationError("unexpected observation shape");
        }
        frame.obs.rgb = decode_f32_blob(obs.at("data").get<std::string>());
        if (frame.obs.rgb.size() != static_cast<size_t>(world::kImageSize) * world::kImageSize * 3) {
          throw ValidationError("observation payload does not match declared shape");
        }
        frame.ee = vec2_from(f.at("ee"));
        frame.gripper_closed = f.at("grip").get<bool>();
        frame.target_bbox = bbox_from(f.at("bbox"));
        traj.frames.push_back(std::move(frame));
      }
      for (const auto& a : j.at("actions")) {
        traj.actions.push_back({a.at(0).get<float>(), a.at(1).get<float>(), a.at(2).get<float>()});
      }
      if (traj.frames.size() != traj.actions.size() + 1) {
        throw ValidationError("frame/action count mismatch");
      }
      out.push_back(std::move(traj));
    } catch (const ValidationError&) {
      throw ValidationError(path + ":" + std::to_string(line_no) + ": invalid trajectory record");
    } catch (const json::exception& e) {
      throw ValidationError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void save_annotations(const std::string& path, const std::vector<AnnotatedSample>& samples) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (const AnnotatedSample& s : samples) {
    json chunk = json::array();
    for (const auto& a : s.action_chunk) chunk.push_back(json::array({a[0], a[1], a[2]}));
    json mask = json::array();
    for (uint8_t m : s.action_mask) mask.push_back(m != 0);
    json line = {{"schema", kSchemaVersion},
                 {"episode_id", s.episode_id},
                 {"instruction", s.instruction},
                 {"cot",
                  {{"subtask", s.subtask}, {"bbox", s.bbox_text}, {"reasoning", s.reasoning}}},
                 {"frame", s.frame},
                 {"future_frame", s.future_frame},
                 {"action_chunk", chunk},
                 {"action_mask", mask}};
    out << line.dump() << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

std::vector<AnnotatedSample> load_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  std::vector<AnnotatedSample> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      if (j.at("schema").get<std::string>() != kSchemaVersion) {
        throw ValidationError("unsupported schema version");
      }
      AnnotatedSample s;
      s.episode_id = j.at("episode_id").get<std::string>();
      s.instruction = j.at("instruction").get<std::string>();
      const json& cot = j.at("cot");
      s.subtask = cot.at("subtask").get<std::string>();
      s.bbox_text = cot.at("bbox").get<std::string>();
      s.reasoning = cot.at("reasoning").get<std::string>();
      s.frame = j.at("frame").get<int>();
      s.future_frame = j.at("future_frame").get<int>();
      for (const auto& a : j.at("action_chunk")) {
        s.action_chunk.push_back({a.at(0).get<float>(), a.at(1).get<float>(), a.at(2).get<float>()});
      }
      for (const auto& m : j.at("action_mask")) s.action_mask.push_back(m.get<bool>() ? 1 : 0);
      if (s.action_mask.size() != s.action_chunk.size()) {
        throw ValidationError("action mask length mismatch");
      }
      out.push_back(std::move(s));
    } catch (const ValidationError&) {
      throw ValidationError(path + ":" + std::to_string(line_no) + ": invalid annotation record");
    } catch (const json::exception& e) {
      throw ValidationError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace lara::dataset
