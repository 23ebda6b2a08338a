#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lara/checkpoint.hpp"
#include "lara/dataset.hpp"
#include "lara/policy.hpp"

namespace lara::train {

// Stage-dependent loss weights are fixed by (stage, variant), not by config:
//   stage I  -> (w_cot, w_vis, w_act_dis) = (1.0, 0.1, 1.0)
//   stage II -> (1.0, 0.2, 1.0), the cot term vanishing structurally by phase 3
//   stage III-> w_act_con = 1.0 only
struct StageConfig {
  int stage = 1;
  int steps = 0;
  int batch_size = 16;
  float lr_trunk = 1e-3f;
  float lr_expert = 1e-3f;
  float warmup_ratio = 0.1f;
  std::string schedule = "cosine";
  int checkpoint_every = 0;  // 0 = final checkpoint only

  float w_cot = 0.0f;
  float w_vis = 0.0f;
  float w_act_dis = 0.0f;
  float w_act_con = 0.0f;

  static StageConfig defaults_for(int stage, tok::CotVariant variant);
  void apply_weight_table(tok::CotVariant variant);  // re-derives the four weights
};

// Linear warmup over the first warmup_ratio of steps, cosine decay to zero.
float lr_at(int64_t step, int64_t total_steps, float peak, float warmup_ratio);

// Stage II: three equal phases; transitions at exactly 1/3 and 2/3.
int curriculum_phase(int64_t step, int64_t total_steps);

struct AdamWConfig {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.01f;
};

// Decoupled weight decay with bias-corrected moments. Parameters without a
// gradient this step are left untouched (no decay either): in stage III that
// freezes everything the flow loss cannot reach.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const AdamWConfig& cfg, const model::ParamList& params);

  void step(model::ParamList& params, const std::vector<const float*>& grads, float lr_trunk,
            float lr_expert);

  int64_t timestep() const { return t_; }
  void restore(int64_t t, const std::map<std::string, Tensor>& m,
               const std::map<std::string, Tensor>& v, const model::ParamList& params);
  void export_state(const model::ParamList& params, std::map<std::string, Tensor>& m,
                    std::map<std::string, Tensor>& v) const;

 private:
  AdamWConfig cfg_;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct MetricsRow {
  int64_t step = 0;
  int stage = 0;
  int phase = 0;
  double w_cot = 0, w_vis = 0, w_act_dis = 0, w_act_con = 0;
  double loss_cot = 0, loss_vis = 0, loss_act_dis = 0, loss_act_con = 0, loss_total = 0;
  int64_t cot_positions = 0;  // supervised CoT targets in this batch
  int cot_segments = 0;       // explicit CoT clauses in the current phase format
  double lr_trunk = 0, lr_expert = 0;
  double grad_norm = 0;
  double wall_ms = 0;  // timing column; excluded from reproducibility hashes
};

class MetricsWriter {
 public:
  MetricsWriter() = default;
  MetricsWriter(const std::string& path, bool append);
  void write(const MetricsRow& row);
  static const char* header();

 private:
  std::string path_;
};

// In-memory join of the trajectory and annotation files.
struct TrainingSet {
  std::vector<world::Trajectory> episodes;
  std::vector<dataset::AnnotatedSample> samples;
  std::vector<int> sample_episode;  // episode index per sample

  static TrainingSet load(const std::string& trajectories_path,
                          const std::string& annotations_path);
  // Deterministic text corpus for vocabulary building.
  std::vector<std::string> corpus() const;
  const world::Observation& frame(int sample_index, int frame_index) const;
};

struct StageRunOptions {
  std::string metrics_path;      // appended per step
  std::string checkpoint_path;   // final; intermediates get ".step<N>" suffixes
  uint64_t seed = 0;             // root seed for fresh stage streams
  std::function<void(int64_t, const MetricsRow&)> on_step;  // optional observer
};

// Runs one curriculum stage. `state` must either complete the previous stage
// or sit mid-way through this one (resume); anything else is a stage-order
// error. Returns with state.stage_complete = true.
void run_stage(Policy& policy, const TrainingSet& data, const StageConfig& cfg, TrainState& state,
               const StageRunOptions& options);

}  // namespace lara::train
