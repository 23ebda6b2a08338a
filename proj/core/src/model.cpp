#include "lara/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace lara::model {

// ---- visual encoders ----

void VisualEncoder::init(const ModelConfig& cfg, Rng& rng, bool requires_grad) {
  const float s = 1.0f / std::sqrt(static_cast<float>(cfg.patch_dim()));
  proj = Tensor::randn({cfg.patch_dim(), cfg.d}, rng, s, requires_grad);
  bias = Tensor::zeros({cfg.d}, requires_grad);
  pos = Tensor::randn({cfg.patch_count(), cfg.d}, rng, 0.02f, requires_grad);
}

Tensor VisualEncoder::encode(const world::Observation& obs) const {
  const int grid = world::kImageSize / 6;
  const int patches = grid * grid;
  const int patch_dim = 6 * 6 * 3;
  if (obs.rgb.size() != static_cast<size_t>(world::kImageSize) * world::kImageSize * 3) {
    throw std::invalid_argument("VisualEncoder::encode: bad observation size");
  }
  std::vector<float> data(static_cast<size_t>(patches) * patch_dim);
  for (int p = 0; p < patches; ++p) {
    const int row0 = (p / grid) * 6, col0 = (p % grid) * 6;
    float* dst = data.data() + static_cast<size_t>(p) * patch_dim;
    for (int r = 0; r < 6; ++r) {
      for (int c = 0; c < 6; ++c) {
        const float* src =
            obs.rgb.data() + ((static_cast<size_t>(row0 + r)) * world::kImageSize + col0 + c) * 3;
        for (int ch = 0; ch < 3; ++ch) dst[(r * 6 + c) * 3 + ch] = src[ch];
      }
    }
  }
  Tensor patches_t = Tensor::from_data({patches, patch_dim}, std::move(data));
  return add(add(matmul(patches_t, proj), bias), pos);
}

void VisualEncoder::collect_params(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".proj", proj, NamedParam::Group::kTrunk});
  out.push_back({prefix + ".bias", bias, NamedParam::Group::kTrunk});
  out.push_back({prefix + ".pos", pos, NamedParam::Group::kTrunk});
}

void ema_update(const VisualEncoder& online, EmaEncoder& ema) {
  const float tau = ema.decay;
  auto blend = [tau](const Tensor& src, Tensor& dst) {
    if (src.shape() != dst.shape()) {
      throw std::invalid_argument("ema_update: parameter shape mismatch");
    }
    std::span<float> d = dst.mutable_data();
    std::span<const float> s = src.data();
    for (size_t i = 0; i < d.size(); ++i) d[i] = tau * d[i] + (1.0f - tau) * s[i];
  };
  blend(online.proj, ema.net.proj);
  blend(online.bias, ema.net.bias);
  blend(online.pos, ema.net.pos);
}

// ---- attention mask ----

BoolMask build_lara_mask(const tok::SegmentLayout& layout, tok::TrainStage stage) {
  layout.validate();
  const int T = layout.size();
  std::vector<tok::SegKind> kind(static_cast<size_t>(T));
  for (const tok::Segment& s : layout.segments) {
    if (stage == tok::TrainStage::kThree && s.kind == tok::SegKind::kAct) {
      throw std::invalid_argument("build_lara_mask: ACT segment not allowed in stage III");
    }
    for (int i = 0; i < s.length; ++i) kind[static_cast<size_t>(s.start + i)] = s.kind;
  }

  BoolMask mask;
  mask.rows = T;
  mask.cols = T;
  mask.allow.assign(static_cast<size_t>(T) * T, 0);
  for (int i = 0; i < T; ++i) {
    bool any = false;
    for (int j = 0; j < T; ++j) {
      bool allow = false;
      switch (kind[static_cast<size_t>(i)]) {
        case tok::SegKind::kText:
          allow = j <= i;
          break;
        case tok::SegKind::kCurImg:
          allow = kind[static_cast<size_t>(j)] == tok::SegKind::kText ||
                  kind[static_cast<size_t>(j)] == tok::SegKind::kCurImg;
          break;
        case tok::SegKind::kFutImg:
          allow = kind[static_cast<size_t>(j)] != tok::SegKind::kAct;
          break;
        case tok::SegKind::kAct:
          allow = kind[static_cast<size_t>(j)] != tok::SegKind::kAct || j < i;
          break;
      }
      if (allow) {
        mask.set(i, j, true);
        any = true;
      }
    }
    if (!any) {
      throw std::invalid_argument("build_lara_mask: row " + std::to_string(i) +
                                  " has no allowed entries");
    }
  }
  return mask;
}

// ---- trunk ----

void Trunk::init(const ModelConfig& config, int vocab, Rng& rng) {
  cfg = config;
  vocab_size = vocab;
  if (cfg.d % cfg.heads != 0) {
    throw std::invalid_argument("Trunk::init: d must be divisible by heads");
  }
  const float se = 0.02f;
  const float sw = 1.0f / std::sqrt(static_cast<float>(cfg.d));
  tok_emb = Tensor::randn({vocab, cfg.d}, rng, se, true);
  pos_emb = Tensor::randn({cfg.max_seq, cfg.d}, rng, se, true);
  layers.clear();
  for (int l = 0; l < cfg.layers; ++l) {
    TrunkLayer layer;
    layer.attn_gain = Tensor::full({cfg.d}, 1.0f, true);
    layer.wq = Tensor::randn({cfg.d, cfg.d}, rng, sw, true);
    layer.wk = Tensor::randn({cfg.d, cfg.d}, rng, sw, true);
    layer.wv = Tensor::randn({cfg.d, cfg.d}, rng, sw, true);
    layer.wo = Tensor::randn({cfg.d, cfg.d}, rng, sw, true);
    layer.ff_gain = Tensor::full({cfg.d}, 1.0f, true);
    layer.w1 = Tensor::randn({cfg.d, 4 * cfg.d}, rng, sw, true);
    layer.w2 = Tensor::randn({4 * cfg.d, cfg.d}, rng, 0.5f * sw, true);
    layers.push_back(std::move(layer));
  }
  final_gain = Tensor::full({cfg.d}, 1.0f, true);
  lm_head = Tensor::randn({cfg.d, vocab}, rng, sw, true);
  vis_head_w = Tensor::randn({cfg.d, cfg.d_z}, rng, sw, true);
  vis_head_b = Tensor::zeros({cfg.d_z}, true);
}

void Trunk::collect_params(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".tok_emb", tok_emb, NamedParam::Group::kTrunk});
  out.push_back({prefix + ".pos_emb", pos_emb, NamedParam::Group::kTrunk});
  for (size_t l = 0; l < layers.size(); ++l) {
    const std::string lp = prefix + ".layer" + std::to_string(l);
    out.push_back({lp + ".attn_gain", layers[l].attn_gain, NamedParam::Group::kTrunk});
    out.push_back({lp + ".wq", layers[l].wq, NamedParam::Group::kTrunk});
    out.push_back({lp + ".wk", layers[l].wk, NamedParam::Group::kTrunk});
    out.push_back({lp + ".wv", layers[l].wv, NamedParam::Group::kTrunk});
    out.push_back({lp + ".wo", layers[l].wo, NamedParam::Group::kTrunk});
    out.push_back({lp + ".ff_gain", layers[l].ff_gain, NamedParam::Group::kTrunk});
    out.push_back({lp + ".w1", layers[l].w1, NamedParam::Group::kTrunk});
    out.push_back({lp + ".w2", layers[l].w2, NamedParam::Group::kTrunk});
  }
  out.push_back({prefix + ".final_gain", final_gain, NamedParam::Group::kTrunk});
  out.push_back({prefix + ".lm_head", lm_head, NamedParam::Group::kTrunk});
  out.push_back({prefix + ".vis_head_w", vis_head_w, NamedParam::Group::kTrunk});
  out.push_back({prefix + ".vis_head_b", vis_head_b, NamedParam::Group::kTrunk});
}

namespace {

Tensor multi_head_attention(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                            const Tensor& wo, const BoolMask& mask, int heads) {
  const int d = x.dim(1);
  const int dh = d / heads;
  const float scale_factor = 1.0f / std::sqrt(static_cast<float>(dh));
  Tensor q = matmul(x, wq), k = matmul(x, wk), v = matmul(x, wv);
  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), scale_factor);
    Tensor probs = masked_softmax(scores, mask);
    head_outs.push_back(matmul(probs, vh));
  }
  return matmul(concat_cols(head_outs), wo);
}

std::vector<int> iota_ids(int n) {
  std::vector<int> ids(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) ids[static_cast<size_t>(i)] = i;
  return ids;
}

}  // namespace

ForwardResult Trunk::forward(std::span<const int> ids, const world::Observation& cur_image,
                             const tok::SegmentLayout& layout, const BoolMask& mask,
                             const VisualEncoder& encoder) const {
  layout.validate();
  const int T = layout.size();
  if (static_cast<int>(ids.size()) != T) {
    throw std::invalid_argument("Trunk::forward: ids length does not match layout");
  }
  if (T > cfg.max_seq) {
    throw std::invalid_argument("Trunk::forward: sequence longer than max_seq");
  }
  if (mask.rows != T || mask.cols != T) {
    throw std::invalid_argument("Trunk::forward: mask size does not match layout");
  }
  for (int id : ids) {
    if (id < 0 || id >= vocab_size) {
      throw std::invalid_argument("Trunk::forward: token id outside vocabulary");
    }
  }

  auto embed = [&](std::span<const int> token_ids) {
    // CUR_IMG positions take visual-encoder latents, everything else the table.
    std::vector<Tensor> pieces;
    for (const tok::Segment& s : layout.segments) {
      if (s.kind == tok::SegKind::kCurImg) {
        if (s.length != cfg.patch_count()) {
          throw std::invalid_argument("Trunk::forward: CUR_IMG segment must hold 16 patches");
        }
        pieces.push_back(encoder.encode(cur_image));
      } else {
        pieces.push_back(gather_rows(
            tok_emb, token_ids.subspan(static_cast<size_t>(s.start), static_cast<size_t>(s.length))));
      }
    }
    return add(concat_rows(pieces), gather_rows(pos_emb, iota_ids(T)));
  };

  auto run_layers = [&](Tensor x) {
    for (const TrunkLayer& layer : layers) {
      x = add(x, multi_head_attention(rms_norm(x, layer.attn_gain, cfg.rms_eps), layer.wq,
                                      layer.wk, layer.wv, layer.wo, mask, cfg.heads));
      x = add(x, matmul(silu(matmul(rms_norm(x, layer.ff_gain, cfg.rms_eps), layer.w1)), layer.w2));
    }
    return rms_norm(x, final_gain, cfg.rms_eps);
  };

  Tensor hidden = run_layers(embed(ids));

  if (cfg.latent_feedback) {
    // Second pass with thinking-token inputs replaced by the hidden state of
    // the previous thinking position (first one keeps its embedding).
    std::vector<int> think_pos;
    for (int i = 0; i < T; ++i) {
      if (ids[static_cast<size_t>(i)] == tok::kThinking) think_pos.push_back(i);
    }
    if (think_pos.size() > 1) {
      Tensor base = embed(ids);
      std::vector<Tensor> rows;
      rows.reserve(static_cast<size_t>(T));
      for (int i = 0; i < T; ++i) {
        auto it = std::find(think_pos.begin(), think_pos.end(), i);
        if (it != think_pos.end() && it != think_pos.begin()) {
          rows.push_back(slice_rows(hidden, *(it - 1), 1));
        } else {
          rows.push_back(slice_rows(base, i, 1));
        }
      }
      hidden = run_layers(concat_rows(rows));
    }
  }

  ForwardResult out;
  out.hidden = hidden;
  out.logits = matmul(hidden, lm_head);
  const std::vector<int> fut = layout.positions_of(tok::SegKind::kFutImg);
  if (!fut.empty()) {
    out.zhat = add(matmul(gather_rows(hidden, fut), vis_head_w), vis_head_b);
  }
  return out;
}

// ---- losses ----

namespace {

// Shift by one: position i supervises target ids[i] from logits row i-1.
Tensor shifted_nll(const Tensor& logits, std::span<const int> ids,
                   const std::vector<uint8_t>& target_flags, const char* what) {
  const int T = logits.dim(0);
  std::vector<int> targets(static_cast<size_t>(T), 0);
  std::vector<uint8_t> mask(static_cast<size_t>(T), 0);
  bool any = false;
  for (int i = 1; i < T; ++i) {
    if (target_flags[static_cast<size_t>(i)]) {
      targets[static_cast<size_t>(i - 1)] = ids[static_cast<size_t>(i)];
      mask[static_cast<size_t>(i - 1)] = 1;
      any = true;
    }
  }
  if (!any) throw std::runtime_error(std::string(what) + ": no supervised positions");
  return cross_entropy(logits, targets, mask);
}

}  // namespace

Tensor cot_loss(const Tensor& logits, std::span<const int> ids, const tok::SegmentLayout& layout) {
  return shifted_nll(logits, ids, layout.cot_flag, "cot_loss");
}

Tensor act_token_loss(const Tensor& logits, std::span<const int> ids,
                      const tok::SegmentLayout& layout) {
  if (layout.positions_of(tok::SegKind::kAct).empty()) {
    throw std::runtime_error("act_token_loss: layout has no ACT segment");
  }
  return shifted_nll(logits, ids, layout.act_flag, "act_token_loss");
}

Tensor vis_loss(const Tensor& zhat, const world::Observation& target_obs, const EmaEncoder& ema) {
  if (!zhat.defined()) throw std::invalid_argument("vis_loss: no visual predictions");
  Tensor target = ema.encode(target_obs);
  if (target.requires_grad()) {
    throw std::logic_error("vis_loss: EMA targets must be gradient-free");
  }
  return l1_loss(zhat, target);
}

LatentContext extract_latent_context(const Tensor& hidden, const tok::SegmentLayout& layout) {
  std::vector<int> positions = layout.positions_of(tok::SegKind::kText);
  const std::vector<int> fut = layout.positions_of(tok::SegKind::kFutImg);
  if (fut.empty()) {
    throw std::invalid_argument("extract_latent_context: layout has no FUT_IMG segment");
  }
  LatentContext ctx;
  ctx.text_count = static_cast<int>(positions.size());
  ctx.fut_count = static_cast<int>(fut.size());
  positions.insert(positions.end(), fut.begin(), fut.end());
  ctx.vectors = gather_rows(hidden, positions);
  return ctx;
}

}  // namespace lara::model
