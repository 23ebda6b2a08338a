#include "lara/flow.hpp"

#include <cmath>
#include <stdexcept>

namespace lara::flow {

void ExpertNet::init(const ExpertConfig& config, Rng& rng) {
  cfg = config;
  if (cfg.width % cfg.heads != 0) {
    throw std::invalid_argument("ExpertNet::init: width must be divisible by heads");
  }
  const float sw = 1.0f / std::sqrt(static_cast<float>(cfg.width));
  w_in = Tensor::randn({cfg.dims, cfg.width}, rng, 0.5f, true);
  b_in = Tensor::zeros({cfg.width}, true);
  w_tau = Tensor::randn({cfg.tau_dim, cfg.width}, rng,
                        1.0f / std::sqrt(static_cast<float>(cfg.tau_dim)), true);
  blocks.clear();
  for (int b = 0; b < cfg.blocks; ++b) {
    ExpertBlock blk;
    blk.self_gain = Tensor::full({cfg.width}, 1.0f, true);
    blk.wq = Tensor::randn({cfg.width, cfg.width}, rng, sw, true);
    blk.wk = Tensor::randn({cfg.width, cfg.width}, rng, sw, true);
    blk.wv = Tensor::randn({cfg.width, cfg.width}, rng, sw, true);
    blk.wo = Tensor::randn({cfg.width, cfg.width}, rng, sw, true);
    blk.cross_gain = Tensor::full({cfg.width}, 1.0f, true);
    blk.cq = Tensor::randn({cfg.width, cfg.width}, rng, sw, true);
    blk.ck = Tensor::randn({cfg.width, cfg.width}, rng, sw, true);
    blk.cv = Tensor::randn({cfg.width, cfg.width}, rng, sw, true);
    blk.co = Tensor::randn({cfg.width, cfg.width}, rng, sw, true);
    blk.ff_gain = Tensor::full({cfg.width}, 1.0f, true);
    blk.w1 = Tensor::randn({cfg.width, 4 * cfg.width}, rng, sw, true);
    blk.w2 = Tensor::randn({4 * cfg.width, cfg.width}, rng, 0.5f * sw, true);
    blocks.push_back(std::move(blk));
  }
  final_gain = Tensor::full({cfg.width}, 1.0f, true);
  w_out = Tensor::randn({cfg.width, cfg.dims}, rng, sw, true);
  b_out = Tensor::zeros({cfg.dims}, true);
}

void ExpertNet::collect_params(const std::string& prefix, model::ParamList& out) {
  using G = model::NamedParam::Group;
  out.push_back({prefix + ".w_in", w_in, G::kExpert});
  out.push_back({prefix + ".b_in", b_in, G::kExpert});
  out.push_back({prefix + ".w_tau", w_tau, G::kExpert});
  for (size_t b = 0; b < blocks.size(); ++b) {
    const std::string bp = prefix + ".block" + std::to_string(b);
    out.push_back({bp + ".self_gain", blocks[b].self_gain, G::kExpert});
    out.push_back({bp + ".wq", blocks[b].wq, G::kExpert});
    out.push_back({bp + ".wk", blocks[b].wk, G::kExpert});
    out.push_back({bp + ".wv", blocks[b].wv, G::kExpert});
    out.push_back({bp + ".wo", blocks[b].wo, G::kExpert});
    out.push_back({bp + ".cross_gain", blocks[b].cross_gain, G::kExpert});
    out.push_back({bp + ".cq", blocks[b].cq, G::kExpert});
    out.push_back({bp + ".ck", blocks[b].ck, G::kExpert});
    out.push_back({bp + ".cv", blocks[b].cv, G::kExpert});
    out.push_back({bp + ".co", blocks[b].co, G::kExpert});
    out.push_back({bp + ".ff_gain", blocks[b].ff_gain, G::kExpert});
    out.push_back({bp + ".w1", blocks[b].w1, G::kExpert});
    out.push_back({bp + ".w2", blocks[b].w2, G::kExpert});
  }
  out.push_back({prefix + ".final_gain", final_gain, G::kExpert});
  out.push_back({prefix + ".w_out", w_out, G::kExpert});
  out.push_back({prefix + ".b_out", b_out, G::kExpert});
}

namespace {

Tensor sinusoidal_tau(float tau, int dim) {
  // tau lives in [0,1]; frequencies span 0.01..100 so the fastest component
  // completes ~16 cycles and the slowest is near-linear.
  std::vector<float> data(static_cast<size_t>(dim));
  const int half = dim / 2;
  for (int k = 0; k < half; ++k) {
    const double freq = 100.0 * std::exp(-std::log(10000.0) * k / std::max(1, half - 1));
    data[static_cast<size_t>(k)] = static_cast<float>(std::sin(tau * freq));
    data[static_cast<size_t>(half + k)] = static_cast<float>(std::cos(tau * freq));
  }
  return Tensor::from_data({1, dim}, std::move(data));
}

Tensor attention(const Tensor& q_in, const Tensor& kv_in, const Tensor& wq, const Tensor& wk,
                 const Tensor& wv, const Tensor& wo, const BoolMask& mask, int heads) {
  const int d = q_in.dim(1);
  const int dh = d / heads;
  const float scale_factor = 1.0f / std::sqrt(static_cast<float>(dh));
  Tensor q = matmul(q_in, wq), k = matmul(kv_in, wk), v = matmul(kv_in, wv);
  std::vector<Tensor> outs;
  outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    Tensor probs = masked_softmax(scale(matmul(qh, transpose(kh)), scale_factor), mask);
    outs.push_back(matmul(probs, vh));
  }
  return matmul(concat_cols(outs), wo);
}

}  // namespace

Tensor ExpertNet::velocity(const Tensor& a_tau, float tau, const Tensor& ctx,
                           const BoolMask* ctx_mask) const {
  if (a_tau.ndim() != 2 || a_tau.dim(0) != cfg.horizon || a_tau.dim(1) != cfg.dims) {
    throw std::invalid_argument("ExpertNet::velocity: a_tau must be [horizon, dims]");
  }
  if (!ctx.defined() || ctx.dim(0) == 0) {
    throw std::invalid_argument("ExpertNet::velocity: empty context");
  }
  if (ctx.dim(1) != cfg.width) {
    throw std::invalid_argument("ExpertNet::velocity: context width mismatch");
  }
  for (float v : a_tau.data()) {
    if (!std::isfinite(v)) throw std::invalid_argument("ExpertNet::velocity: non-finite input");
  }

  Tensor tau_row = matmul(sinusoidal_tau(tau, cfg.tau_dim), w_tau);      // [1, width]
  Tensor x = add(add(matmul(a_tau, w_in), b_in), gather_rows(tau_row, std::vector<int>(
                                                     static_cast<size_t>(cfg.horizon), 0)));

  const BoolMask self_mask = BoolMask::all(cfg.horizon, cfg.horizon);
  BoolMask cross_mask = ctx_mask ? *ctx_mask : BoolMask::all(cfg.horizon, ctx.dim(0));
  if (cross_mask.rows != cfg.horizon || cross_mask.cols != ctx.dim(0)) {
    throw std::invalid_argument("ExpertNet::velocity: ctx mask size mismatch");
  }

  for (const ExpertBlock& blk : blocks) {
    x = add(x, attention(rms_norm(x, blk.self_gain, cfg.rms_eps), x, blk.wq, blk.wk, blk.wv,
                         blk.wo, self_mask, cfg.heads));
    x = add(x, attention(rms_norm(x, blk.cross_gain, cfg.rms_eps), ctx, blk.cq, blk.ck, blk.cv,
                         blk.co, cross_mask, cfg.heads));
    x = add(x, matmul(silu(matmul(rms_norm(x, blk.ff_gain, cfg.rms_eps), blk.w1)), blk.w2));
  }
  return add(matmul(rms_norm(x, final_gain, cfg.rms_eps), w_out), b_out);
}

Tensor interpolate(const Tensor& a_t, const Tensor& eps, float tau) {
  if (a_t.shape() != eps.shape()) {
    throw std::invalid_argument("interpolate: chunk and noise shapes differ");
  }
  if (tau < 0.0f || tau > 1.0f) {
    throw std::invalid_argument("interpolate: tau outside [0, 1]");
  }
  return add(scale(eps, 1.0f - tau), scale(a_t, tau));
}

FlowDraw draw_noise(const ExpertConfig& cfg, Rng& rng) {
  FlowDraw draw;
  draw.eps = Tensor::randn({cfg.horizon, cfg.dims}, rng);
  draw.tau = static_cast<float>(rng.uniform());
  return draw;
}

Tensor flow_loss_with(const ExpertConfig& cfg, const VelocityFn& velocity,
                      std::span<const FlowSample> batch, Rng& rng) {
  (void)cfg;
  if (batch.empty()) throw std::invalid_argument("flow_loss: empty batch");
  Tensor total;
  for (size_t s = 0; s < batch.size(); ++s) {
    const FlowSample& sample = batch[s];
    const FlowDraw draw = draw_noise(cfg, rng);
    Tensor a_tau = interpolate(sample.a_t, draw.eps, draw.tau);
    Tensor v = velocity(a_tau, draw.tau, s);
    // target: a_t - eps, gradient-free
    std::vector<float> target(static_cast<size_t>(sample.a_t.numel()));
    for (size_t i = 0; i < target.size(); ++i) {
      target[i] = sample.a_t.data()[i] - draw.eps.data()[i];
    }
    Tensor term = mse_loss(v, Tensor::from_data(sample.a_t.shape(), std::move(target)));
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, 1.0f / static_cast<float>(batch.size()));
}

Tensor flow_loss(const ExpertNet& net, std::span<const FlowSample> batch, Rng& rng) {
  return flow_loss_with(
      net.cfg,
      [&](const Tensor& a_tau, float tau, size_t s) {
        return net.velocity(a_tau, tau, batch[s].ctx);
      },
      batch, rng);
}

Tensor sample_actions_with(const ExpertConfig& cfg, const VelocityFn& velocity, int steps,
                           Rng& rng) {
  if (steps < 1) throw std::invalid_argument("sample_actions: steps must be >= 1");
  Tensor a = Tensor::randn({cfg.horizon, cfg.dims}, rng);
  const float dt = 1.0f / static_cast<float>(steps);
  for (int k = 0; k < steps; ++k) {
    const float tau = static_cast<float>(k) / static_cast<float>(steps);
    Tensor v = velocity(a, tau, 0);
    std::vector<float> next(static_cast<size_t>(a.numel()));
    for (size_t i = 0; i < next.size(); ++i) {
      next[i] = a.data()[i] + dt * v.data()[i];
      if (!std::isfinite(next[i])) {
        throw std::runtime_error("sample_actions: non-finite integration state");
      }
    }
    a = Tensor::from_data(a.shape(), std::move(next));
  }
  std::vector<float> clamped(static_cast<size_t>(a.numel()));
  for (size_t i = 0; i < clamped.size(); ++i) {
    clamped[i] = std::clamp(a.data()[i], -1.0f, 1.0f);
  }
  return Tensor::from_data(a.shape(), std::move(clamped));
}

Tensor sample_actions(const ExpertNet& net, const Tensor& ctx, int steps, Rng& rng,
                      const BoolMask* ctx_mask) {
  return sample_actions_with(
      net.cfg,
      [&](const Tensor& a, float tau, size_t) { return net.velocity(a, tau, ctx, ctx_mask); },
      steps, rng);
}

}  // namespace lara::flow
