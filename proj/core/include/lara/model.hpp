#pragma once

#include <string>
#include <vector>

#include "lara/tensor.hpp"
#include "lara/tokenizer.hpp"
#include "lara/worldsim.hpp"

namespace lara::model {

struct ModelConfig {
  int d = 128;
  int layers = 4;
  int heads = 4;
  int d_z = 128;
  int max_seq = 160;
  float tau_v = 0.99f;
  float rms_eps = 1e-5f;
  // Coconut-style feedback: thinking-token inputs take the previous thinking
  // position's hidden state from a first pass. Off by default; the appendix
  // formats read as fixed learnable embeddings.
  bool latent_feedback = false;

  int patch_grid() const { return world::kImageSize / 6; }         // 4
  int patch_count() const { return patch_grid() * patch_grid(); }  // 16
  int patch_dim() const { return 6 * 6 * 3; }                      // 108
};

struct NamedParam {
  std::string name;
  Tensor tensor;
  enum class Group { kTrunk, kExpert } group = Group::kTrunk;
};

using ParamList = std::vector<NamedParam>;

// 6x6-patch projection with learned per-patch position embeddings. Yields
// exactly 16 latents of width d.
struct VisualEncoder {
  Tensor proj;  // [108, d]
  Tensor bias;  // [d]
  Tensor pos;   // [16, d]

  void init(const ModelConfig& cfg, Rng& rng, bool requires_grad);
  Tensor encode(const world::Observation& obs) const;
  void collect_params(const std::string& prefix, ParamList& out);
};

// Shadow copy updated as theta_ema = tau * theta_ema + (1 - tau) * theta.
// Never receives gradients.
struct EmaEncoder {
  VisualEncoder net;
  float decay = 0.99f;

  Tensor encode(const world::Observation& obs) const { return net.encode(obs); }
};

void ema_update(const VisualEncoder& online, EmaEncoder& ema);

// Attention rules per segment kind:
//   TEXT    row i: every j <= i
//   CUR_IMG row i: all TEXT, all CUR_IMG
//   FUT_IMG row i: all TEXT, CUR_IMG, FUT_IMG (never ACT)
//   ACT     row i: all TEXT, CUR_IMG, FUT_IMG, and ACT j < i
// Stage III layouts must not contain an ACT segment.
BoolMask build_lara_mask(const tok::SegmentLayout& layout, tok::TrainStage stage);

struct TrunkLayer {
  Tensor attn_gain, wq, wk, wv, wo;
  Tensor ff_gain, w1, w2;
};

struct ForwardResult {
  Tensor hidden;  // [T, d] final layer, normalized
  Tensor logits;  // [T, V]
  Tensor zhat;    // [16, d_z] visual-head readout at FUT_IMG positions
};

struct Trunk {
  ModelConfig cfg;
  int vocab_size = 0;
  Tensor tok_emb;  // [V, d]
  Tensor pos_emb;  // [max_seq, d]
  std::vector<TrunkLayer> layers;
  Tensor final_gain;
  Tensor lm_head;     // [d, V]
  Tensor vis_head_w;  // [d, d_z]
  Tensor vis_head_b;  // [d_z]

  void init(const ModelConfig& cfg, int vocab_size, Rng& rng);
  ForwardResult forward(std::span<const int> ids, const world::Observation& cur_image,
                        const tok::SegmentLayout& layout, const BoolMask& mask,
                        const VisualEncoder& encoder) const;
  void collect_params(const std::string& prefix, ParamList& out);
};

Tensor cot_loss(const Tensor& logits, std::span<const int> ids, const tok::SegmentLayout& layout);
Tensor act_token_loss(const Tensor& logits, std::span<const int> ids,
                      const tok::SegmentLayout& layout);
Tensor vis_loss(const Tensor& zhat, const world::Observation& target_obs, const EmaEncoder& ema);

// h_t: final-layer hidden states at all TEXT positions (instruction plus
// thinking wrapper) followed by all FUT_IMG positions.
struct LatentContext {
  Tensor vectors;  // [C, d]
  int text_count = 0;
  int fut_count = 0;
};

LatentContext extract_latent_context(const Tensor& hidden, const tok::SegmentLayout& layout);

}  // namespace lara::model
