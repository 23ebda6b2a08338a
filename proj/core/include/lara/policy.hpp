#pragma once

#include "lara/flow.hpp"
#include "lara/model.hpp"
#include "lara/tokenizer.hpp"

namespace lara {

// Everything a checkpoint stores: the trunk and its visual encoders, the
// flow-matching action expert, and the data-dependent pieces (vocabulary,
// action normalization) that make a checkpoint self-contained.
struct Policy {
  model::ModelConfig model_cfg;
  flow::ExpertConfig expert_cfg;
  tok::ActionTokenizerCfg act_cfg;
  tok::Vocab vocab;
  tok::ActionNormalizer norm;
  tok::CotVariant variant = tok::CotVariant::kLatentTextVis;

  model::VisualEncoder online;
  model::EmaEncoder ema;
  model::Trunk trunk;
  flow::ExpertNet expert;

  static Policy init(const model::ModelConfig& model_cfg, const flow::ExpertConfig& expert_cfg,
                     const tok::ActionTokenizerCfg& act_cfg, tok::Vocab vocab,
                     const tok::ActionNormalizer& norm, tok::CotVariant variant, Rng& rng);

  // Trainable parameters in a stable registration order (trunk group first,
  // then the expert). EMA parameters are excluded: they never take gradients.
  model::ParamList params();
};

}  // namespace lara
