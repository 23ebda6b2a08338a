#include "lara/policy.hpp"

#include <stdexcept>

namespace lara {

Policy Policy::init(const model::ModelConfig& model_cfg, const flow::ExpertConfig& expert_cfg,
                    const tok::ActionTokenizerCfg& act_cfg, tok::Vocab vocab,
                    const tok::ActionNormalizer& norm, tok::CotVariant variant, Rng& rng) {
  if (expert_cfg.width != model_cfg.d) {
    throw std::invalid_argument("Policy::init: expert width must equal trunk width");
  }
  if (expert_cfg.horizon != act_cfg.horizon || expert_cfg.dims != act_cfg.dims) {
    throw std::invalid_argument("Policy::init: expert horizon/dims must match action config");
  }
  Policy p;
  p.model_cfg = model_cfg;
  p.expert_cfg = expert_cfg;
  p.act_cfg = act_cfg;
  p.vocab = std::move(vocab);
  p.norm = norm;
  p.variant = variant;
  p.online.init(model_cfg, rng, /*requires_grad=*/true);
  p.ema.net.init(model_cfg, rng, /*requires_grad=*/false);
  p.ema.decay = model_cfg.tau_v;
  // start the shadow as a copy of the online encoder
  for (int i = 0; i < p.online.proj.numel(); ++i) {
    p.ema.net.proj.mutable_data()[static_cast<size_t>(i)] = p.online.proj.data()[i];
  }
  for (int i = 0; i < p.online.bias.numel(); ++i) {
    p.ema.net.bias.mutable_data()[static_cast<size_t>(i)] = p.online.bias.data()[i];
  }
  for (int i = 0; i < p.online.pos.numel(); ++i) {
    p.ema.net.pos.mutable_data()[static_cast<size_t>(i)] = p.online.pos.data()[i];
  }
  p.trunk.init(model_cfg, p.vocab.size(), rng);
  p.expert.init(expert_cfg, rng);
  return p;
}

model::ParamList Policy::params() {
  model::ParamList out;
  online.collect_params("online", out);
  trunk.collect_params("trunk", out);
  expert.collect_params("expert", out);
  return out;
}

}  // namespace lara
