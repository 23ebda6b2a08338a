#pragma once

#include "lara/model.hpp"
#include "lara/tensor.hpp"

namespace lara::flow {

struct ExpertConfig {
  int width = 128;  // must equal the trunk width (cross-attention keys)
  int blocks = 4;
  int heads = 4;
  int horizon = 8;
  int dims = 3;
  int tau_dim = 64;
  float rms_eps = 1e-5f;
};

struct ExpertBlock {
  Tensor self_gain, wq, wk, wv, wo;
  Tensor cross_gain, cq, ck, cv, co;
  Tensor ff_gain, w1, w2;
};

// Reduced diffusion-transformer over H action-step tokens with alternating
// self-attention and cross-attention to the trunk's latent context; the flow
// time tau enters through a sinusoidal embedding added to every token.
struct ExpertNet {
  ExpertConfig cfg;
  Tensor w_in, b_in;  // [dims, width], [width]
  Tensor w_tau;       // [tau_dim, width]
  std::vector<ExpertBlock> blocks;
  Tensor final_gain;
  Tensor w_out, b_out;  // [width, dims], [dims]

  void init(const ExpertConfig& cfg, Rng& rng);
  // a_tau: [H, dims]; ctx: [C, width]. ctx_mask rows=H restricts which context
  // vectors are visible (all visible when null).
  Tensor velocity(const Tensor& a_tau, float tau, const Tensor& ctx,
                  const BoolMask* ctx_mask = nullptr) const;
  void collect_params(const std::string& prefix, model::ParamList& out);
};

// a_tau = (1 - tau) * eps + tau * a_t
Tensor interpolate(const Tensor& a_t, const Tensor& eps, float tau);

struct FlowSample {
  Tensor a_t;  // [H, dims], normalized action chunk
  Tensor ctx;  // [C, width]
};

struct FlowDraw {
  Tensor eps;
  float tau = 0.0f;
};

FlowDraw draw_noise(const ExpertConfig& cfg, Rng& rng);

// Pluggable velocity field; lets tests drive the loss and the sampler with
// analytic oracles through the exact same code path as the network.
using VelocityFn = std::function<Tensor(const Tensor& a_tau, float tau, size_t sample_index)>;

// E[ || v(a_tau, tau | ctx) - (a_t - eps) ||^2 ], eps ~ N(0,I), tau ~ U(0,1).
Tensor flow_loss(const ExpertNet& net, std::span<const FlowSample> batch, Rng& rng);
Tensor flow_loss_with(const ExpertConfig& cfg, const VelocityFn& velocity,
                      std::span<const FlowSample> batch, Rng& rng);

// Euler integration from noise: a <- a + (1/steps) * v(a, k/steps, ctx),
// k = 0..steps-1; result clamped to [-1, 1] per component.
Tensor sample_actions(const ExpertNet& net, const Tensor& ctx, int steps, Rng& rng,
                      const BoolMask* ctx_mask = nullptr);
Tensor sample_actions_with(const ExpertConfig& cfg, const VelocityFn& velocity, int steps,
                           Rng& rng);

}  // namespace lara::flow
