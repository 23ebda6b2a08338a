#include "lara/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "lara/error.hpp"

namespace lara {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'L', 'A', 'R', 'A'};

json model_cfg_json(const model::ModelConfig& m) {
  return {{"d", m.d},           {"layers", m.layers},
          {"heads", m.heads},   {"d_z", m.d_z},
          {"max_seq", m.max_seq}, {"tau_v", m.tau_v},
          {"rms_eps", m.rms_eps}, {"latent_feedback", m.latent_feedback}};
}

model::ModelConfig model_cfg_from(const json& j) {
  model::ModelConfig m;
  m.d = j.at("d").get<int>();
  m.layers = j.at("layers").get<int>();
  m.heads = j.at("heads").get<int>();
  m.d_z = j.at("d_z").get<int>();
  m.max_seq = j.at("max_seq").get<int>();
  m.tau_v = j.at("tau_v").get<float>();
  m.rms_eps = j.at("rms_eps").get<float>();
  m.latent_feedback = j.at("latent_feedback").get<bool>();
  return m;
}

json expert_cfg_json(const flow::ExpertConfig& e) {
  return {{"width", e.width}, {"blocks", e.blocks},   {"heads", e.heads},
          {"horizon", e.horizon}, {"dims", e.dims},   {"tau_dim", e.tau_dim},
          {"rms_eps", e.rms_eps}};
}

flow::ExpertConfig expert_cfg_from(const json& j) {
  flow::ExpertConfig e;
  e.width = j.at("width").get<int>();
  e.blocks = j.at("blocks").get<int>();
  e.heads = j.at("heads").get<int>();
  e.horizon = j.at("horizon").get<int>();
  e.dims = j.at("dims").get<int>();
  e.tau_dim = j.at("tau_dim").get<int>();
  e.rms_eps = j.at("rms_eps").get<float>();
  return e;
}

struct TensorEntry {
  std::string name;
  Tensor tensor;
};

}  // namespace

void save_checkpoint(const std::string& path, Policy& policy, const TrainState& state) {
  std::vector<TensorEntry> entries;
  for (model::NamedParam& p : policy.params()) entries.push_back({p.name, p.tensor});
  entries.push_back({"ema.proj", policy.ema.net.proj});
  entries.push_back({"ema.bias", policy.ema.net.bias});
  entries.push_back({"ema.pos", policy.ema.net.pos});
  for (const auto& [name, t] : state.opt_m) entries.push_back({"opt.m." + name, t});
  for (const auto& [name, t] : state.opt_v) entries.push_back({"opt.v." + name, t});

  json words = json::object();
  for (int id = 0; id < policy.vocab.text_size(); ++id) {
    words[policy.vocab.id_to_word[static_cast<size_t>(id)]] = id;
  }

  json tensors = json::array();
  uint64_t offset = 0;
  for (const TensorEntry& e : entries) {
    tensors.push_back({{"name", e.name}, {"shape", e.tensor.shape()}, {"offset", offset}});
    offset += static_cast<uint64_t>(e.tensor.numel()) * sizeof(float);
  }

  json header = {
      {"format_version", kCheckpointVersion},
      {"model", model_cfg_json(policy.model_cfg)},
      {"expert", expert_cfg_json(policy.expert_cfg)},
      {"action", {{"bins", policy.act_cfg.bins},
                  {"horizon", policy.act_cfg.horizon},
                  {"dims", policy.act_cfg.dims}}},
      {"norm", {{"lo", policy.norm.lo}, {"hi", policy.norm.hi}}},
      {"vocab", {{"action_bins", policy.vocab.action_bins}, {"words", words}}},
      {"variant", tok::variant_name(policy.variant)},
      {"stage", state.stage},
      {"stage_complete", state.stage_complete},
      {"step", state.step},
      {"phase", state.phase},
      {"opt_t", state.opt_t},
      {"rng_state", state.rng_state},
      {"tensors", tensors},
  };
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(kMagic, 4);
  const uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const uint64_t header_len = header_text.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const TensorEntry& e : entries) {
    out.write(reinterpret_cast<const char*>(e.tensor.data().data()),
              static_cast<std::streamsize>(e.tensor.numel() * sizeof(float)));
  }
  if (!out) throw IoError("write failed: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw ValidationError(path + ": not a LARA checkpoint");
  }
  uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != kCheckpointVersion) {
    throw ValidationError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw ValidationError(path + ": truncated header");

  json header = json::parse(header_text);

  tok::Vocab vocab;
  vocab.action_bins = header.at("vocab").at("action_bins").get<int>();
  {
    std::vector<std::pair<int, std::string>> words;
    for (const auto& [w, id] : header.at("vocab").at("words").items()) {
      words.emplace_back(id.get<int>(), w);
    }
    std::sort(words.begin(), words.end());
    vocab.id_to_word.resize(words.size());
    for (auto& [id, w] : words) {
      vocab.id_to_word[static_cast<size_t>(id)] = w;
      if (id == tok::kAt || id >= tok::kNumReserved) vocab.word_to_id[w] = id;
    }
  }

  tok::ActionTokenizerCfg act_cfg;
  act_cfg.bins = header.at("action").at("bins").get<int>();
  act_cfg.horizon = header.at("action").at("horizon").get<int>();
  act_cfg.dims = header.at("action").at("dims").get<int>();

  tok::ActionNormalizer norm;
  norm.lo = header.at("norm").at("lo").get<std::array<float, 3>>();
  norm.hi = header.at("norm").at("hi").get<std::array<float, 3>>();

  Rng init_rng(0);  // overwritten below from the payload
  LoadedCheckpoint loaded{
      Policy::init(model_cfg_from(header.at("model")), expert_cfg_from(header.at("expert")),
                   act_cfg, std::move(vocab), norm,
                   tok::variant_from_name(header.at("variant").get<std::string>()), init_rng),
      TrainState{}};

  loaded.state.stage = header.at("stage").get<int>();
  loaded.state.stage_complete = header.at("stage_complete").get<bool>();
  loaded.state.step = header.at("step").get<int64_t>();
  loaded.state.phase = header.at("phase").get<int>();
  loaded.state.opt_t = header.at("opt_t").get<int64_t>();
  loaded.state.rng_state = header.at("rng_state").get<std::string>();

  std::map<std::string, Tensor> by_name;
  for (model::NamedParam& p : loaded.policy.params()) by_name.emplace(p.name, p.tensor);
  by_name.emplace("ema.proj", loaded.policy.ema.net.proj);
  by_name.emplace("ema.bias", loaded.policy.ema.net.bias);
  by_name.emplace("ema.pos", loaded.policy.ema.net.pos);

  const std::streampos payload_start = in.tellg();
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    const uint64_t offset = entry.at("offset").get<uint64_t>();

    Tensor target;
    if (auto it = by_name.find(name); it != by_name.end()) {
      target = it->second;
      if (target.shape() != shape) {
        throw ValidationError(path + ": tensor shape mismatch for " + name);
      }
    } else if (name.rfind("opt.m.", 0) == 0 || name.rfind("opt.v.", 0) == 0) {
      target = Tensor::zeros(shape);
      if (name.rfind("opt.m.", 0) == 0) {
        loaded.state.opt_m.emplace(name.substr(6), target);
      } else {
        loaded.state.opt_v.emplace(name.substr(6), target);
      }
    } else {
      throw ValidationError(path + ": unknown tensor name " + name);
    }
    in.seekg(payload_start + static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(target.mutable_data().data()),
            static_cast<std::streamsize>(target.numel() * sizeof(float)));
    if (!in) throw ValidationError(path + ": truncated payload at " + name);
  }
  return loaded;
}

}  // namespace lara
