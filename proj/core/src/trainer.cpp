#include "lara/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <unordered_map>

#include "lara/annotate.hpp"
#include "lara/error.hpp"
#include "lara/parallel.hpp"

namespace lara::train {

// ---- config ----

void StageConfig::apply_weight_table(tok::CotVariant variant) {
  w_cot = w_vis = w_act_dis = w_act_con = 0.0f;
  switch (stage) {
    case 1:
      w_cot = 1.0f;
      w_vis = 0.1f;
      w_act_dis = 1.0f;
      break;
    case 2:
      w_cot = 1.0f;
      w_vis = 0.2f;
      w_act_dis = 1.0f;
      break;
    case 3:
      w_act_con = 1.0f;
      break;
    default:
      throw ValidationError("StageConfig: stage must be 1, 2, or 3");
  }
  if (variant == tok::CotVariant::kNone) w_cot = 0.0f;
  if (variant != tok::CotVariant::kLatentTextVis) w_vis = 0.0f;
}

StageConfig StageConfig::defaults_for(int stage, tok::CotVariant variant) {
  StageConfig cfg;
  cfg.stage = stage;
  switch (stage) {
    case 1: cfg.steps = 2000; break;
    case 2: cfg.steps = 900; break;
    case 3: cfg.steps = 3000; break;
    default: throw ValidationError("StageConfig: stage must be 1, 2, or 3");
  }
  cfg.apply_weight_table(variant);
  return cfg;
}

float lr_at(int64_t step, int64_t total_steps, float peak, float warmup_ratio) {
  if (step < 0 || total_steps <= 0) throw std::invalid_argument("lr_at: bad step/total");
  const int64_t warmup = std::max<int64_t>(1, static_cast<int64_t>(total_steps * warmup_ratio));
  if (step < warmup) {
    return peak * static_cast<float>(step + 1) / static_cast<float>(warmup);
  }
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(std::max<int64_t>(1, total_steps - warmup));
  return peak * 0.5f * static_cast<float>(1.0 + std::cos(M_PI * progress));
}

int curriculum_phase(int64_t step, int64_t total_steps) {
  if (step >= total_steps) return 3;
  if (3 * step < total_steps) return 1;
  if (3 * step < 2 * total_steps) return 2;
  return 3;
}

// ---- optimizer ----

AdamW::AdamW(const AdamWConfig& cfg, const model::ParamList& params) : cfg_(cfg) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const model::NamedParam& p : params) {
    m_.push_back(Tensor::zeros(p.tensor.shape()));
    v_.push_back(Tensor::zeros(p.tensor.shape()));
  }
}

void AdamW::step(model::ParamList& params, const std::vector<const float*>& grads, float lr_trunk,
                 float lr_expert) {
  if (grads.size() != params.size() || m_.size() != params.size()) {
    throw std::invalid_argument("AdamW::step: parameter/gradient count mismatch");
  }
  ++t_;
  const float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(t_));
  const float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    const float* g = grads[i];
    if (!g) continue;  // no gradient reached this parameter: leave it frozen
    const float lr =
        params[i].group == model::NamedParam::Group::kTrunk ? lr_trunk : lr_expert;
    std::span<float> p = params[i].tensor.mutable_data();
    std::span<float> m = m_[i].mutable_data();
    std::span<float> v = v_[i].mutable_data();
    for (size_t j = 0; j < p.size(); ++j) {
      if (!std::isfinite(g[j])) {
        throw std::runtime_error("AdamW::step: non-finite gradient for " + params[i].name);
      }
      m[j] = cfg_.beta1 * m[j] + (1.0f - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0f - cfg_.beta2) * g[j] * g[j];
      const float mhat = m[j] / bc1;
      const float vhat = v[j] / bc2;
      p[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[j]);
    }
  }
}

void AdamW::restore(int64_t t, const std::map<std::string, Tensor>& m,
                    const std::map<std::string, Tensor>& v, const model::ParamList& params) {
  t_ = t;
  for (size_t i = 0; i < params.size(); ++i) {
    auto copy_into = [&](const std::map<std::string, Tensor>& src, Tensor& dst) {
      auto it = src.find(params[i].name);
      if (it == src.end()) return;
      if (it->second.shape() != dst.shape()) {
        throw ValidationError("AdamW::restore: moment shape mismatch for " + params[i].name);
      }
      std::copy(it->second.data().begin(), it->second.data().end(), dst.mutable_data().begin());
    };
    copy_into(m, m_[i]);
    copy_into(v, v_[i]);
  }
}

void AdamW::export_state(const model::ParamList& params, std::map<std::string, Tensor>& m,
                         std::map<std::string, Tensor>& v) const {
  m.clear();
  v.clear();
  for (size_t i = 0; i < params.size(); ++i) {
    m.emplace(params[i].name, m_[i]);
    v.emplace(params[i].name, v_[i]);
  }
}

// ---- metrics ----

const char* MetricsWriter::header() {
  return "step,stage,phase,w_cot,w_vis,w_act_dis,w_act_con,loss_cot,loss_vis,loss_act_dis,"
         "loss_act_con,loss_total,cot_positions,cot_segments,lr_trunk,lr_expert,grad_norm,wall_ms";
}

MetricsWriter::MetricsWriter(const std::string& path, bool append) : path_(path) {
  if (path_.empty()) return;
  const bool exists = static_cast<bool>(std::ifstream(path_));
  if (!append || !exists) {
    std::ofstream out(path_);
    if (!out) throw IoError("cannot open metrics file: " + path_);
    out << header() << "\n";
  }
}

void MetricsWriter::write(const MetricsRow& r) {
  if (path_.empty()) return;
  std::ofstream out(path_, std::ios::app);
  if (!out) throw IoError("cannot append metrics file: " + path_);
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "%lld,%d,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%lld,%d,%.9g,%.9g,%.9g,"
                "%.3f",
                static_cast<long long>(r.step), r.stage, r.phase, r.w_cot, r.w_vis, r.w_act_dis,
                r.w_act_con, r.loss_cot, r.loss_vis, r.loss_act_dis, r.loss_act_con, r.loss_total,
                static_cast<long long>(r.cot_positions), r.cot_segments, r.lr_trunk, r.lr_expert,
                r.grad_norm, r.wall_ms);
  out << buf << "\n";
}

// ---- dataset ----

TrainingSet TrainingSet::load(const std::string& trajectories_path,
                              const std::string& annotations_path) {
  TrainingSet set;
  set.episodes = dataset::load_trajectories(trajectories_path);
  set.samples = dataset::load_annotations(annotations_path);
  std::unordered_map<std::string, int> by_id;
  for (size_t i = 0; i < set.episodes.size(); ++i) {
    by_id.emplace(set.episodes[i].episode_id, static_cast<int>(i));
  }
  set.sample_episode.reserve(set.samples.size());
  for (const dataset::AnnotatedSample& s : set.samples) {
    auto it = by_id.find(s.episode_id);
    if (it == by_id.end()) {
      throw ValidationError("annotation references unknown episode " + s.episode_id);
    }
    const auto& frames = set.episodes[static_cast<size_t>(it->second)].frames;
    if (s.frame < 0 || s.future_frame >= static_cast<int>(frames.size())) {
      throw ValidationError("annotation frame outside episode " + s.episode_id);
    }
    set.sample_episode.push_back(it->second);
  }
  return set;
}

std::vector<std::string> TrainingSet::corpus() const {
  std::vector<std::string> out;
  out.reserve(samples.size() * 4);
  for (const dataset::AnnotatedSample& s : samples) {
    out.push_back(s.instruction);
    out.push_back("Subtask: " + s.subtask + ".");
    out.push_back("BBox: " + s.bbox_text + ".");
    out.push_back("Reasoning: " + s.reasoning + ".");
  }
  return out;
}

const world::Observation& TrainingSet::frame(int sample_index, int frame_index) const {
  const int ep = sample_episode[static_cast<size_t>(sample_index)];
  return episodes[static_cast<size_t>(ep)].frames[static_cast<size_t>(frame_index)].obs;
}

// ---- training ----

namespace {

tok::TrainStage to_train_stage(int stage) {
  switch (stage) {
    case 1: return tok::TrainStage::kOne;
    case 2: return tok::TrainStage::kTwo;
    case 3: return tok::TrainStage::kThree;
  }
  throw ValidationError("stage must be 1, 2, or 3");
}

int explicit_cot_segments(tok::CotVariant variant, int stage, int phase) {
  if (variant == tok::CotVariant::kNone) return 0;
  if (variant == tok::CotVariant::kExplicit) return stage == 3 ? 3 : 3;
  switch (stage) {
    case 1: return 3;
    case 2: return 3 - phase;
    default: return 0;
  }
}

struct SampleEval {
  std::unique_ptr<Tape> tape;
  Tensor total;
  double cot = 0, vis = 0, act_dis = 0, act_con = 0;
  bool has_cot = false, has_vis = false, has_act_dis = false, has_act_con = false;
  int64_t cot_positions = 0;
};

struct StepOutcome {
  MetricsRow row;
};

StepOutcome train_step(Policy& policy, const TrainingSet& data, const StageConfig& cfg, int phase,
                       model::ParamList& params, AdamW& opt, Rng& rng, int64_t step) {
  const auto t0 = std::chrono::steady_clock::now();
  const tok::TrainStage stage = to_train_stage(cfg.stage);

  // All randomness is drawn up front, sequentially, so worker scheduling can
  // never change the stream.
  std::vector<int> indices(static_cast<size_t>(cfg.batch_size));
  for (int& idx : indices) {
    idx = static_cast<int>(rng.uniform_int(0, static_cast<int64_t>(data.samples.size()) - 1));
  }
  std::vector<flow::FlowDraw> draws;
  if (cfg.stage == 3) {
    draws.reserve(indices.size());
    for (size_t i = 0; i < indices.size(); ++i) draws.push_back(flow::draw_noise(policy.expert.cfg, rng));
  }

  std::vector<SampleEval> evals(indices.size());
  parallel_for(static_cast<int>(indices.size()), [&](int slot) {
    const int sample_index = indices[static_cast<size_t>(slot)];
    const dataset::AnnotatedSample& sample = data.samples[static_cast<size_t>(sample_index)];
    SampleEval& eval = evals[static_cast<size_t>(slot)];

    eval.tape = std::make_unique<Tape>();
    tok::FormatResult fmt = tok::format_sequence(policy.vocab, sample, stage, phase,
                                                 policy.act_cfg, policy.norm, policy.variant);
    const BoolMask mask = model::build_lara_mask(fmt.layout, stage);
    const world::Observation& cur = data.frame(sample_index, sample.frame);
    model::ForwardResult fwd =
        policy.trunk.forward(fmt.ids, cur, fmt.layout, mask, policy.online);

    Tensor total;
    auto add_term = [&](const Tensor& term, float weight, double& value, bool& flag) {
      value = term.item();
      flag = true;
      Tensor weighted = scale(term, weight);
      total = total.defined() ? add(total, weighted) : weighted;
    };

    if (cfg.stage != 3) {
      eval.cot_positions = fmt.layout.count_flagged(fmt.layout.cot_flag);
      if (cfg.w_cot > 0.0f && eval.cot_positions > 0) {
        add_term(model::cot_loss(fwd.logits, fmt.ids, fmt.layout), cfg.w_cot, eval.cot,
                 eval.has_cot);
      }
      if (cfg.w_vis > 0.0f) {
        const world::Observation& fut = data.frame(sample_index, sample.future_frame);
        add_term(model::vis_loss(fwd.zhat, fut, policy.ema), cfg.w_vis, eval.vis, eval.has_vis);
      }
      if (cfg.w_act_dis > 0.0f) {
        add_term(model::act_token_loss(fwd.logits, fmt.ids, fmt.layout), cfg.w_act_dis,
                 eval.act_dis, eval.has_act_dis);
      }
    } else {
      model::LatentContext ctx = model::extract_latent_context(fwd.hidden, fmt.layout);
      std::vector<float> normalized(static_cast<size_t>(policy.act_cfg.horizon) * 3);
      for (int k = 0; k < policy.act_cfg.horizon; ++k) {
        for (int d = 0; d < 3; ++d) {
          normalized[static_cast<size_t>(k) * 3 + d] =
              policy.norm.normalize(d, sample.action_chunk[static_cast<size_t>(k)][static_cast<size_t>(d)]);
        }
      }
      Tensor a_t = Tensor::from_data({policy.act_cfg.horizon, 3}, std::move(normalized));
      const flow::FlowDraw& draw = draws[static_cast<size_t>(slot)];
      Tensor a_tau = flow::interpolate(a_t, draw.eps, draw.tau);
      Tensor v = policy.expert.velocity(a_tau, draw.tau, ctx.vectors);
      std::vector<float> target(static_cast<size_t>(a_t.numel()));
      for (size_t i = 0; i < target.size(); ++i) target[i] = a_t.data()[i] - draw.eps.data()[i];
      add_term(mse_loss(v, Tensor::from_data(a_t.shape(), std::move(target))), cfg.w_act_con,
               eval.act_con, eval.has_act_con);
    }

    if (!total.defined()) {
      throw std::runtime_error("train_step: no active loss terms for sample");
    }
    eval.total = total;
    eval.tape->backward(total);
    eval.tape->deactivate();  // tape is read (and destroyed) on the main thread
  });

  // Ordered reduction: per parameter, sum sample gradients in slot order and
  // average over the batch. Parallel across parameters, deterministic for any
  // worker count.
  std::vector<std::vector<float>> grads(params.size());
  std::vector<uint8_t> has_grad(params.size(), 0);
  const float inv_batch = 1.0f / static_cast<float>(cfg.batch_size);
  parallel_for(static_cast<int>(params.size()), [&](int pi) {
    const detail::TensorNode* node = params[static_cast<size_t>(pi)].tensor.node();
    std::vector<float> acc;
    for (const SampleEval& eval : evals) {
      const std::vector<float>* g = eval.tape->grad_data(node);
      if (!g) continue;
      if (acc.empty()) acc.assign(g->size(), 0.0f);
      for (size_t j = 0; j < g->size(); ++j) acc[j] += (*g)[j];
    }
    if (!acc.empty()) {
      for (float& x : acc) x *= inv_batch;
      grads[static_cast<size_t>(pi)] = std::move(acc);
      has_grad[static_cast<size_t>(pi)] = 1;
    }
  });

  double norm_sq = 0.0;
  for (size_t pi = 0; pi < grads.size(); ++pi) {
    if (!has_grad[pi]) continue;
    for (float g : grads[pi]) norm_sq += static_cast<double>(g) * g;
  }
  const double grad_norm = std::sqrt(norm_sq);
  const float clip = grad_norm > 1.0 ? static_cast<float>(1.0 / grad_norm) : 1.0f;
  if (clip != 1.0f) {
    for (size_t pi = 0; pi < grads.size(); ++pi) {
      if (!has_grad[pi]) continue;
      for (float& g : grads[pi]) g *= clip;
    }
  }

  std::vector<const float*> grad_ptrs(params.size(), nullptr);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    if (has_grad[pi]) grad_ptrs[pi] = grads[pi].data();
  }
  const float lr_trunk = lr_at(step, cfg.steps, cfg.lr_trunk, cfg.warmup_ratio);
  const float lr_expert = lr_at(step, cfg.steps, cfg.lr_expert, cfg.warmup_ratio);
  opt.step(params, grad_ptrs, lr_trunk, lr_expert);

  if (cfg.stage != 3) ema_update(policy.online, policy.ema);

  StepOutcome out;
  MetricsRow& row = out.row;
  row.step = step;
  row.stage = cfg.stage;
  row.phase = phase;
  row.w_vis = cfg.w_vis;
  row.w_act_dis = cfg.w_act_dis;
  row.w_act_con = cfg.w_act_con;
  int n_cot = 0, n_vis = 0, n_dis = 0, n_con = 0;
  for (const SampleEval& eval : evals) {
    if (eval.has_cot) {
      row.loss_cot += eval.cot;
      ++n_cot;
    }
    if (eval.has_vis) {
      row.loss_vis += eval.vis;
      ++n_vis;
    }
    if (eval.has_act_dis) {
      row.loss_act_dis += eval.act_dis;
      ++n_dis;
    }
    if (eval.has_act_con) {
      row.loss_act_con += eval.act_con;
      ++n_con;
    }
    row.loss_total += eval.total.item();
    row.cot_positions += eval.cot_positions;
  }
  if (n_cot) row.loss_cot /= n_cot;
  if (n_vis) row.loss_vis /= n_vis;
  if (n_dis) row.loss_act_dis /= n_dis;
  if (n_con) row.loss_act_con /= n_con;
  row.loss_total /= cfg.batch_size;
  // the cot weight is inactive once no explicit positions remain
  row.w_cot = n_cot > 0 ? cfg.w_cot : 0.0;
  row.cot_segments = explicit_cot_segments(policy.variant, cfg.stage, phase);
  row.lr_trunk = lr_trunk;
  row.lr_expert = lr_expert;
  row.grad_norm = grad_norm;
  if (!std::isfinite(row.loss_total)) {
    throw std::runtime_error("train_step: non-finite loss at step " + std::to_string(step));
  }
  row.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace

void run_stage(Policy& policy, const TrainingSet& data, const StageConfig& cfg, TrainState& state,
               const StageRunOptions& options) {
  if (data.samples.empty()) throw ValidationError("run_stage: empty training set");
  const bool fresh = (cfg.stage == 1 && state.stage == 0) ||
                     (state.stage == cfg.stage - 1 && state.stage_complete);
  const bool resume = state.stage == cfg.stage && !state.stage_complete;
  if (!fresh && !resume) {
    throw StageOrderError("stage " + std::to_string(cfg.stage) + " requires a completed stage " +
                          std::to_string(cfg.stage - 1) + " checkpoint (have stage " +
                          std::to_string(state.stage) +
                          (state.stage_complete ? ", complete" : ", incomplete") + ")");
  }
  const bool latent_variant = policy.variant == tok::CotVariant::kLatentText ||
                              policy.variant == tok::CotVariant::kLatentTextVis;
  if (cfg.stage == 2 && !latent_variant) {
    throw ValidationError("stage 2 curriculum only applies to latent variants");
  }

  model::ParamList params = policy.params();
  AdamW opt(AdamWConfig{}, params);
  Rng rng = Rng::stream(options.seed, "train", static_cast<uint64_t>(cfg.stage));
  int64_t start_step = 0;
  if (resume) {
    opt.restore(state.opt_t, state.opt_m, state.opt_v, params);
    rng.load_state(state.rng_state);
    start_step = state.step;
  }

  MetricsWriter metrics;
  if (!options.metrics_path.empty()) {
    metrics = MetricsWriter(options.metrics_path, /*append=*/resume);
  }

  auto snapshot = [&](bool complete, int64_t steps_done, int phase) {
    state.stage = cfg.stage;
    state.stage_complete = complete;
    state.step = steps_done;
    state.phase = phase;
    state.opt_t = opt.timestep();
    state.rng_state = rng.save_state();
    opt.export_state(params, state.opt_m, state.opt_v);
  };

  int phase = cfg.stage == 1 ? 0 : 3;
  for (int64_t step = start_step; step < cfg.steps; ++step) {
    if (cfg.stage == 2) phase = curriculum_phase(step, cfg.steps);
    StepOutcome outcome;
    try {
      outcome = train_step(policy, data, cfg, phase, params, opt, rng, step);
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("stage " + std::to_string(cfg.stage) + " step " +
                               std::to_string(step) + ": " + e.what());
    }
    metrics.write(outcome.row);
    if (options.on_step) options.on_step(step, outcome.row);
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
        step + 1 < cfg.steps && !options.checkpoint_path.empty()) {
      snapshot(false, step + 1, phase);
      save_checkpoint(options.checkpoint_path + ".step" + std::to_string(step + 1), policy, state);
    }
  }

  snapshot(true, cfg.steps, phase);
  if (!options.checkpoint_path.empty()) {
    save_checkpoint(options.checkpoint_path, policy, state);
  }
}

}  // namespace lara::train
