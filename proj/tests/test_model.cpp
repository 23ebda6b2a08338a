#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "lara/gradcheck.hpp"
#include "lara/model.hpp"

using namespace lara;
using namespace lara::model;
using tok::SegKind;
using tok::SegmentLayout;
using tok::TrainStage;

namespace {

// Independent brute-force rule interpreter, cell by cell:
//   TEXT row: causal within text and over any earlier tokens  -> j <= i
//   CUR row:  all TEXT, bidirectional within CUR
//   FUT row:  all TEXT and CUR plus bidirectional within FUT, never ACT
//   ACT row:  all TEXT, CUR, FUT, and ACT positions < i
bool rule_oracle(SegKind ki, SegKind kj, int i, int j) {
  switch (ki) {
    case SegKind::kText:
      return j <= i;
    case SegKind::kCurImg:
      return kj == SegKind::kText || kj == SegKind::kCurImg;
    case SegKind::kFutImg:
      return kj == SegKind::kText || kj == SegKind::kCurImg || kj == SegKind::kFutImg;
    case SegKind::kAct:
      if (kj == SegKind::kAct) return j < i;
      return true;
  }
  return false;
}

SegmentLayout make_layout(const std::vector<std::pair<SegKind, int>>& spec) {
  SegmentLayout layout;
  int pos = 0;
  for (const auto& [kind, len] : spec) {
    layout.segments.push_back({kind, pos, len});
    pos += len;
  }
  layout.cot_flag.assign(static_cast<size_t>(pos), 0);
  layout.vis_flag.assign(static_cast<size_t>(pos), 0);
  layout.act_flag.assign(static_cast<size_t>(pos), 0);
  return layout;
}

SegmentLayout random_layout(Rng& rng, int max_tokens) {
  // first segment is TEXT so the leading row can attend to something
  std::vector<std::pair<SegKind, int>> spec;
  int budget = max_tokens;
  const int first = 1 + static_cast<int>(rng.uniform_int(0, 3));
  spec.push_back({SegKind::kText, first});
  budget -= first;
  while (budget > 0 && rng.uniform() < 0.8) {
    const SegKind kind = static_cast<SegKind>(rng.uniform_int(0, 3));
    const int len = 1 + static_cast<int>(rng.uniform_int(0, std::min(budget, 6) - 1));
    spec.push_back({kind, len});
    budget -= len;
  }
  return make_layout(spec);
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.d_z = 16;
  cfg.max_seq = 96;
  return cfg;
}

world::Observation random_obs(Rng& rng) {
  world::Observation obs;
  obs.rgb.resize(static_cast<size_t>(world::kImageSize) * world::kImageSize * 3);
  for (float& v : obs.rgb) v = static_cast<float>(rng.uniform());
  return obs;
}

// A small but complete layout: [CUR x16, TEXT x6, FUT x16, ACT x6]
struct Fixture {
  ModelConfig cfg = tiny_config();
  Trunk trunk;
  VisualEncoder encoder;
  EmaEncoder ema;
  SegmentLayout layout;
  std::vector<int> ids;
  world::Observation obs;

  explicit Fixture(uint64_t seed, bool with_act = true) {
    Rng rng(seed);
    trunk.init(cfg, 40, rng);
    encoder.init(cfg, rng, true);
    ema.net.init(cfg, rng, false);
    ema.decay = cfg.tau_v;
    obs = random_obs(rng);

    std::vector<std::pair<SegKind, int>> spec = {
        {SegKind::kCurImg, 16}, {SegKind::kText, 6}, {SegKind::kFutImg, 16}};
    if (with_act) spec.push_back({SegKind::kAct, 6});
    layout = make_layout(spec);
    ids.assign(static_cast<size_t>(layout.size()), 0);
    for (int i = 16; i < 22; ++i) ids[static_cast<size_t>(i)] = 10 + (i - 16);  // text ids
    for (int i = 22; i < 38; ++i) ids[static_cast<size_t>(i)] = tok::kImgNext;
    if (with_act) {
      for (int i = 38; i < 44; ++i) {
        ids[static_cast<size_t>(i)] = 20 + (i - 38);
        layout.act_flag[static_cast<size_t>(i)] = 1;
      }
    }
    for (int i = 17; i < 22; ++i) layout.cot_flag[static_cast<size_t>(i)] = 1;
    for (int i = 22; i < 38; ++i) layout.vis_flag[static_cast<size_t>(i)] = 1;
  }
};

}  // namespace

TEST_CASE("pure text layout gives a lower-triangular mask") {
  SegmentLayout layout = make_layout({{SegKind::kText, 3}});
  BoolMask mask = build_lara_mask(layout, TrainStage::kOne);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) CHECK(mask.at(i, j) == (j <= i));
  }
}

TEST_CASE("hand layout matches the rule interpreter cell by cell") {
  SegmentLayout layout = make_layout(
      {{SegKind::kText, 2}, {SegKind::kCurImg, 2}, {SegKind::kFutImg, 2}, {SegKind::kAct, 2}});
  BoolMask mask = build_lara_mask(layout, TrainStage::kOne);
  for (int i = 0; i < 8; ++i) {
    for (int j = 0; j < 8; ++j) {
      CHECK(mask.at(i, j) == rule_oracle(layout.kind_at(i), layout.kind_at(j), i, j));
    }
  }
}

TEST_CASE("mask equals the oracle on 1000 random layouts") {
  Rng rng(101);
  for (int trial = 0; trial < 1000; ++trial) {
    SegmentLayout layout = random_layout(rng, 32);
    const bool has_act = !layout.positions_of(SegKind::kAct).empty();
    BoolMask mask = build_lara_mask(layout, has_act ? TrainStage::kOne : TrainStage::kThree);
    for (int i = 0; i < layout.size(); ++i) {
      const SegKind ki = layout.kind_at(i);
      for (int j = 0; j < layout.size(); ++j) {
        const SegKind kj = layout.kind_at(j);
        REQUIRE(mask.at(i, j) == rule_oracle(ki, kj, i, j));
        if (ki == SegKind::kFutImg && kj == SegKind::kAct) REQUIRE_FALSE(mask.at(i, j));
      }
    }
  }
}

TEST_CASE("stage III rejects ACT segments") {
  SegmentLayout layout = make_layout({{SegKind::kText, 2}, {SegKind::kAct, 2}});
  CHECK_THROWS_AS(build_lara_mask(layout, TrainStage::kThree), std::invalid_argument);
  CHECK_NOTHROW(build_lara_mask(layout, TrainStage::kOne));
}

TEST_CASE("forward produces the contracted shapes") {
  Fixture f(7);
  BoolMask mask = build_lara_mask(f.layout, TrainStage::kOne);
  ForwardResult r = f.trunk.forward(f.ids, f.obs, f.layout, mask, f.encoder);
  CHECK(r.hidden.shape() == std::vector<int>{f.layout.size(), f.cfg.d});
  CHECK(r.logits.shape() == std::vector<int>{f.layout.size(), 40});
  CHECK(r.zhat.shape() == std::vector<int>{16, f.cfg.d_z});
}

TEST_CASE("CUR_IMG outputs are permutation-equivariant with zeroed position embeddings") {
  Fixture f(11);
  for (float& v : f.encoder.pos.mutable_data()) v = 0.0f;
  for (float& v : f.trunk.pos_emb.mutable_data()) v = 0.0f;
  BoolMask mask = build_lara_mask(f.layout, TrainStage::kOne);

  ForwardResult a = f.trunk.forward(f.ids, f.obs, f.layout, mask, f.encoder);

  // swap patches 2 and 9 (6x6 blocks) in the observation
  world::Observation swapped = f.obs;
  auto patch_px = [&](int p, int r, int c) {
    const int row0 = (p / 4) * 6, col0 = (p % 4) * 6;
    return ((static_cast<size_t>(row0 + r)) * world::kImageSize + col0 + c) * 3;
  };
  for (int r = 0; r < 6; ++r) {
    for (int c = 0; c < 6; ++c) {
      for (int ch = 0; ch < 3; ++ch) {
        std::swap(swapped.rgb[patch_px(2, r, c) + ch], swapped.rgb[patch_px(9, r, c) + ch]);
      }
    }
  }
  ForwardResult b = f.trunk.forward(f.ids, swapped, f.layout, mask, f.encoder);

  // CUR rows 2 and 9 swap, every other position identical
  for (int i = 0; i < f.layout.size(); ++i) {
    for (int d = 0; d < f.cfg.d; ++d) {
      const float expect = (i == 2)   ? a.hidden(9, d)
                           : (i == 9) ? a.hidden(2, d)
                                      : a.hidden(i, d);
      CHECK(b.hidden(i, d) == doctest::Approx(expect).epsilon(1e-4));
    }
  }
}

TEST_CASE("masked columns cannot influence outputs") {
  // Single layer: no multi-hop paths, so mask[i][j] == false must isolate
  // position i from perturbations of token j.
  ModelConfig cfg = tiny_config();
  cfg.layers = 1;
  Rng rng(13);
  Trunk trunk;
  trunk.init(cfg, 40, rng);
  VisualEncoder enc;
  enc.init(cfg, rng, true);
  Fixture f(13);
  BoolMask mask = build_lara_mask(f.layout, TrainStage::kOne);

  ForwardResult base = trunk.forward(f.ids, f.obs, f.layout, mask, enc);
  const int j = 39;  // ACT position
  std::vector<int> perturbed(f.ids.begin(), f.ids.end());
  perturbed[static_cast<size_t>(j)] = 31;
  ForwardResult probe = trunk.forward(perturbed, f.obs, f.layout, mask, enc);
  for (int i = 0; i < f.layout.size(); ++i) {
    // i == j always carries its own input through the residual stream
    if (i == j || mask.at(i, j)) continue;
    for (int d = 0; d < cfg.d; ++d) CHECK(probe.hidden(i, d) == base.hidden(i, d));
  }

  // Deep probe: ACT perturbations stay invisible to TEXT/CUR/FUT through all
  // layers (nothing outside ACT ever attends an ACT column).
  Fixture g(17);
  BoolMask gmask = build_lara_mask(g.layout, TrainStage::kOne);
  ForwardResult gbase = g.trunk.forward(g.ids, g.obs, g.layout, gmask, g.encoder);
  std::vector<int> gperturbed(g.ids.begin(), g.ids.end());
  gperturbed[38] = 35;
  ForwardResult gprobe = g.trunk.forward(gperturbed, g.obs, g.layout, gmask, g.encoder);
  for (int i = 0; i < 38; ++i) {
    for (int d = 0; d < g.cfg.d; ++d) CHECK(gprobe.hidden(i, d) == gbase.hidden(i, d));
  }
}

TEST_CASE("cot_loss: uniform logits give ln V; scalar oracle on a hand case") {
  Fixture f(19);
  Tensor logits = Tensor::zeros({f.layout.size(), 40});
  Tensor loss = cot_loss(logits, f.ids, f.layout);
  CHECK(loss.item() == doctest::Approx(std::log(40.0)));

  // hand-built 4-token case against a scalar loop
  SegmentLayout small = make_layout({{SegKind::kText, 4}});
  small.cot_flag = {0, 1, 1, 0};
  std::vector<int> ids = {3, 5, 7, 2};
  Rng rng(23);
  Tensor lg = Tensor::randn({4, 9}, rng, 1.5f);
  double expected = 0.0;
  for (int i : {1, 2}) {  // supervised targets, predicted from row i-1
    double z = 0.0;
    for (int v = 0; v < 9; ++v) z += std::exp(static_cast<double>(lg(i - 1, v)));
    expected += std::log(z) - lg(i - 1, ids[static_cast<size_t>(i)]);
  }
  expected /= 2.0;
  CHECK(cot_loss(lg, ids, small).item() == doctest::Approx(expected));

  // phase-3 style layout: no supervised positions -> error
  SegmentLayout empty = make_layout({{SegKind::kText, 4}});
  CHECK_THROWS_WITH_AS(cot_loss(lg, ids, empty), doctest::Contains("no supervised"),
                       std::runtime_error);
}

TEST_CASE("act_token_loss counts padded positions out") {
  Fixture f(29);
  Tensor logits = Tensor::zeros({f.layout.size(), 40});
  // 6 act positions, drop supervision on the last one
  f.layout.act_flag[43] = 0;
  Tensor loss = act_token_loss(logits, f.ids, f.layout);
  CHECK(loss.item() == doctest::Approx(std::log(40.0)));

  Fixture g(29, /*with_act=*/false);
  CHECK_THROWS_AS(act_token_loss(logits, g.ids, g.layout), std::runtime_error);
}

TEST_CASE("vis_loss hits zero on matching latents and blocks EMA gradients") {
  Fixture f(31);
  Rng rng(5);
  world::Observation target = random_obs(rng);
  Tensor z = f.ema.encode(target);
  CHECK_FALSE(z.requires_grad());
  CHECK(vis_loss(z, target, f.ema).item() == doctest::Approx(0.0));

  // gradient reaches trunk and online encoder parameters, never the EMA copy
  BoolMask mask = build_lara_mask(f.layout, TrainStage::kOne);
  Tape tape;
  ForwardResult r = f.trunk.forward(f.ids, f.obs, f.layout, mask, f.encoder);
  Tensor loss = vis_loss(r.zhat, target, f.ema);
  tape.backward(loss);
  CHECK(tape.has_grad(f.encoder.proj));
  CHECK(tape.has_grad(f.trunk.vis_head_w));
  CHECK_FALSE(tape.has_grad(f.ema.net.proj));

  // value against a scalar-loop oracle on a random pair
  Tensor a = Tensor::randn({16, 16}, rng);
  Tensor b = Tensor::randn({16, 16}, rng);
  double expected = 0.0;
  for (int i = 0; i < a.numel(); ++i) expected += std::abs(a.data()[i] - b.data()[i]);
  expected /= a.numel();
  CHECK(l1_loss(a, b).item() == doctest::Approx(expected));
}

TEST_CASE("ema_update formula limits and geometric decay") {
  ModelConfig cfg = tiny_config();
  Rng rng(37);
  VisualEncoder online;
  online.init(cfg, rng, true);

  // tau = 0: shadow equals online after one update
  EmaEncoder ema0;
  ema0.net.init(cfg, rng, false);
  ema0.decay = 0.0f;
  ema_update(online, ema0);
  CHECK(ema0.net.proj.data()[0] == online.proj.data()[0]);
  CHECK(ema0.net.pos.data()[5] == online.pos.data()[5]);

  // tau = 1: shadow never moves
  EmaEncoder ema1;
  ema1.net.init(cfg, rng, false);
  ema1.decay = 1.0f;
  const float before = ema1.net.proj.data()[0];
  ema_update(online, ema1);
  CHECK(ema1.net.proj.data()[0] == before);

  // constant online parameters: ||ema_k - theta|| = tau^k ||ema_0 - theta||
  for (float tau : {0.5f, 0.99f}) {
    EmaEncoder ema;
    ema.net.init(cfg, rng, false);
    ema.decay = tau;
    auto norm_diff = [&] {
      double acc = 0.0;
      for (int i = 0; i < online.proj.numel(); ++i) {
        const double d = static_cast<double>(ema.net.proj.data()[i]) - online.proj.data()[i];
        acc += d * d;
      }
      return std::sqrt(acc);
    };
    const double initial = norm_diff();
    const int k = 12;
    for (int step = 0; step < k; ++step) ema_update(online, ema);
    CHECK(std::abs(norm_diff() - std::pow(tau, k) * initial) < 1e-6);
  }
}

TEST_CASE("extract_latent_context orders text then future positions") {
  Fixture f(41, /*with_act=*/false);
  BoolMask mask = build_lara_mask(f.layout, TrainStage::kThree);
  ForwardResult r = f.trunk.forward(f.ids, f.obs, f.layout, mask, f.encoder);
  LatentContext ctx = extract_latent_context(r.hidden, f.layout);
  CHECK(ctx.text_count == 6);
  CHECK(ctx.fut_count == 16);
  CHECK(ctx.vectors.shape() == std::vector<int>{22, f.cfg.d});

  // identical inputs, identical context
  LatentContext again = extract_latent_context(r.hidden, f.layout);
  for (int i = 0; i < ctx.vectors.numel(); ++i) {
    CHECK(ctx.vectors.data()[i] == again.vectors.data()[i]);
  }

  // zeroing FUT hidden rows changes exactly the trailing 16 context vectors
  Tensor hacked = r.hidden.detach();
  for (int pos : f.layout.positions_of(SegKind::kFutImg)) {
    for (int d = 0; d < f.cfg.d; ++d) {
      hacked.mutable_data()[static_cast<size_t>(pos) * f.cfg.d + d] = 0.0f;
    }
  }
  LatentContext zeroed = extract_latent_context(hacked, f.layout);
  for (int i = 0; i < ctx.text_count; ++i) {
    for (int d = 0; d < f.cfg.d; ++d) CHECK(zeroed.vectors(i, d) == ctx.vectors(i, d));
  }
  for (int i = ctx.text_count; i < 22; ++i) {
    for (int d = 0; d < f.cfg.d; ++d) CHECK(zeroed.vectors(i, d) == 0.0f);
  }
}

TEST_CASE("latent feedback flag changes thinking-dependent outputs deterministically") {
  Fixture f(43, /*with_act=*/false);
  // make two text positions thinking tokens
  f.ids[18] = tok::kThinking;
  f.ids[19] = tok::kThinking;
  BoolMask mask = build_lara_mask(f.layout, TrainStage::kThree);
  ForwardResult off = f.trunk.forward(f.ids, f.obs, f.layout, mask, f.encoder);

  Trunk fb = f.trunk;
  fb.cfg.latent_feedback = true;
  ForwardResult on1 = fb.forward(f.ids, f.obs, f.layout, mask, f.encoder);
  ForwardResult on2 = fb.forward(f.ids, f.obs, f.layout, mask, f.encoder);
  bool differs = false;
  for (int i = 0; i < off.hidden.numel(); ++i) {
    CHECK(on1.hidden.data()[i] == on2.hidden.data()[i]);
    if (on1.hidden.data()[i] != off.hidden.data()[i]) differs = true;
  }
  CHECK(differs);
}

TEST_CASE("full trunk microstep gradient check at small width") {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.d_z = 8;
  cfg.max_seq = 64;
  Rng rng(47);
  Trunk trunk;
  trunk.init(cfg, 24, rng);
  VisualEncoder enc;
  enc.init(cfg, rng, true);
  EmaEncoder ema;
  ema.net.init(cfg, rng, false);

  SegmentLayout layout = make_layout(
      {{SegKind::kCurImg, 16}, {SegKind::kText, 4}, {SegKind::kFutImg, 16}, {SegKind::kAct, 4}});
  std::vector<int> ids(static_cast<size_t>(layout.size()), 0);
  for (int i = 16; i < 20; ++i) {
    ids[static_cast<size_t>(i)] = 10 + (i - 16);
    layout.cot_flag[static_cast<size_t>(i)] = i > 16;
  }
  for (int i = 20; i < 36; ++i) {
    ids[static_cast<size_t>(i)] = tok::kImgNext;
    layout.vis_flag[static_cast<size_t>(i)] = 1;
  }
  for (int i = 36; i < 40; ++i) {
    ids[static_cast<size_t>(i)] = 18 + (i - 36);
    layout.act_flag[static_cast<size_t>(i)] = 1;
  }
  world::Observation obs = random_obs(rng);
  world::Observation next_obs = random_obs(rng);
  BoolMask mask = build_lara_mask(layout, TrainStage::kOne);

  // The visual term uses a smooth head loss here: central differences are
  // undefined at |x| kinks, and the L1 subgradient is checked separately at
  // kink-safe inputs in the tensor suite.
  Tensor z_target = ema.encode(next_obs).detach();
  auto f = [&] {
    ForwardResult r = trunk.forward(ids, obs, layout, mask, enc);
    Tensor loss = cot_loss(r.logits, ids, layout);
    loss = add(loss, scale(mse_loss(r.zhat, z_target), 0.1f));
    return add(loss, act_token_loss(r.logits, ids, layout));
  };

  ParamList params;
  trunk.collect_params("trunk", params);
  enc.collect_params("enc", params);
  std::vector<Tensor> tensors;
  for (auto& p : params) tensors.push_back(p.tensor);
  auto report = grad_check(f, tensors, 1e-3);
  CHECK(report.max_rel_err < 1e-3);
}
