// SPDX-License-Identifier: Apache-2.0

#include "maskrdt/model.hpp"
#include "support.hpp"

#include <doctest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <vector>

using namespace maskrdt;
using namespace maskrdt::test;

namespace {

ModelConfig tiny(std::size_t context = 4) {
  ModelConfig c;
  c.d_h = 8;
  c.heads = 2;
  c.layers = 2;
  c.context = context;
  c.segment_len = 3;
  c.state_dim = 3;
  c.catalog = 5;
  c.ffn_mult = 2;
  c.horizon = 10;
  c.dropout = 0.0;
  return c;
}

Trajectory random_traj(std::size_t len, const ModelConfig& cfg, Rng& rng) {
  std::vector<Step> steps;
  for (std::size_t t = 0; t < len; ++t) {
    Step s;
    for (std::size_t i = 0; i < cfg.state_dim; ++i) s.state.push_back(normal(rng));
    s.action = uniform_index(rng, cfg.catalog);
    s.reward = uniform01(rng) < 0.5 ? 1.0 : 0.0;
    steps.push_back(std::move(s));
  }
  return Trajectory(0, std::move(steps));
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Overwrites every masked slot's source value with noise.
MaskedSegment scramble_masked(MaskedSegment seg, const ModelConfig& cfg, Rng& rng) {
  for (std::size_t j = 0; j < seg.context; ++j) {
    if (!seg.is_visible(j, Token::state))
      for (auto& x : seg.states[j]) x = normal(rng, 10.0);
    if (!seg.is_visible(j, Token::action)) seg.actions[j] = uniform_index(rng, cfg.catalog);
    if (!seg.is_visible(j, Token::rtg)) seg.rtg[j] = normal(rng, 50.0);
  }
  seg.target_action = uniform_index(rng, cfg.catalog);
  seg.target_reward = uniform01(rng);
  return seg;
}

ParamSet with_param(ParamSet p, const std::string& name, Tensor v) {
  p.set(name, std::move(v));
  return p;
}

}  // namespace

TEST_CASE("config validation and json") {
  auto c = tiny();
  CHECK_NOTHROW(c.validate());
  CHECK(ModelConfig::from_json(c.to_json()) == c);
  auto bad = c;
  bad.heads = 3;
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.context = 0;
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.dropout = 1.0;
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.mode = RetentionMode::chunkwise;
  bad.segment_len = 0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("param set") {
  auto rng = make_rng(51);
  const auto cfg = tiny();
  auto p = init_params(cfg, rng);
  CHECK(p.contains("embed.mask"));
  CHECK(p.get("embed.pos").shape() == Shape{12, 8});
  CHECK(p.get("action_net.l2.w").shape() == Shape{8, 5});
  CHECK(p.get("action_net.l1.w").shape() == Shape{9, 8});
  CHECK(p.get("reward_net.l1.w").shape() == Shape{16, 8});
  CHECK(p.contains("block1.msr.w_o"));
  CHECK_FALSE(p.contains("block2.msr.w_o"));
  CHECK_THROWS_AS(p.get("nope"), std::out_of_range);
  CHECK_THROWS_AS(p.set("embed.mask", Tensor::zeros({2, 8})), DimensionError);
  CHECK_THROWS(p.add("embed.mask", Tensor::zeros({1, 8})));
  Graph g;
  const auto on = p.on_graph(g);
  CHECK(on.size() == p.size());
  CHECK(on.get("embed.mask").on_graph());
  CHECK(g.size() == p.size());
}

TEST_CASE("masked slots have zero influence") {
  auto rng = make_rng(52);
  for (auto mode : {RetentionMode::recurrent, RetentionMode::parallel, RetentionMode::chunkwise}) {
    auto cfg = tiny(5);
    cfg.mode = mode;
    const auto p = init_params(cfg, rng);
    for (int trial = 0; trial < 10; ++trial) {
      const auto traj = random_traj(9, cfg, rng);
      const auto t = uniform_index(rng, traj.size());
      const auto seg = build_segment(traj, t, cfg.context, sample_mask(t, cfg.context, rng));
      const auto a = forward(seg, p, cfg);
      const auto b = forward(scramble_masked(seg, cfg, rng), p, cfg);
      CHECK(values(a.logits) == values(b.logits));
      CHECK(a.reward.item() == b.reward.item());
    }
  }
}

TEST_CASE("zero residual branches make a block the identity") {
  auto rng = make_rng(53);
  const auto cfg = tiny();
  auto p = init_params(cfg, rng);
  p.set("block0.msr.w_o", Tensor::zeros({8, 8}));
  p.set("block0.ffn.l2.w", Tensor::zeros({16, 8}));
  const auto h = random_tensor({12, 8}, rng);
  CHECK(values(block(h, p, cfg, 0)) == values(h));
}

TEST_CASE("blocks are causal") {
  auto rng = make_rng(54);
  for (auto mode : {RetentionMode::recurrent, RetentionMode::parallel, RetentionMode::chunkwise}) {
    auto cfg = tiny();
    cfg.mode = mode;
    const auto p = init_params(cfg, rng);
    const auto h = random_tensor({12, 8}, rng);
    const std::size_t n = 1 + uniform_index(rng, 11);
    std::vector<double> bumped(h.data().begin(), h.data().end());
    for (std::size_t i = n * 8; i < bumped.size(); ++i) bumped[i] += normal(rng);
    const auto a = block(h, p, cfg, 1), b = block(Tensor({12, 8}, bumped), p, cfg, 1);
    for (std::size_t i = 0; i < n * 8; ++i) CHECK(a[i] == b[i]);
    bool changed = false;
    for (std::size_t i = n * 8; i < 12 * 8; ++i) changed |= a[i] != b[i];
    CHECK(changed);
  }
}

TEST_CASE("dropout") {
  auto rng = make_rng(55);
  auto cfg = tiny();
  const auto p = init_params(cfg, rng);
  const auto seg = build_segment(random_traj(6, cfg, rng), 5, cfg.context, 3);
  auto r1 = make_rng(1);
  const auto train0 = forward(seg, p, cfg, {true, &r1});
  CHECK(values(train0.logits) == values(forward(seg, p, cfg).logits));

  cfg.dropout = 0.5;
  auto r2 = make_rng(1), r3 = make_rng(1);
  const auto x = forward(seg, p, cfg, {true, &r2});
  const auto y = forward(seg, p, cfg, {true, &r3});
  CHECK(values(x.logits) == values(y.logits));
  CHECK(values(x.logits) != values(forward(seg, p, cfg).logits));
  CHECK_THROWS(forward(seg, p, cfg, {true, nullptr}));
}

TEST_CASE("single visible step") {
  auto rng = make_rng(56);
  const auto cfg = tiny();
  const auto p = init_params(cfg, rng);
  const auto traj = random_traj(6, cfg, rng);
  const auto out = forward(build_segment(traj, 4, cfg.context, 1), p, cfg);
  CHECK(out.logits.shape() == Shape{1, 5});
  CHECK(std::isfinite(out.reward.item()));
}

TEST_CASE("reward head") {
  auto rng = make_rng(57);
  const auto cfg = tiny();
  const auto p = init_params(cfg, rng);
  const auto psi_s = random_tensor({1, 8}, rng), psi_a = random_tensor({1, 8}, rng);

  SUBCASE("zero output weights give the bias") {
    auto z = with_param(p, "reward_net.l2.w", Tensor::zeros({8, 1}));
    z.set("reward_net.l2.b", Tensor::matrix(1, 1, {0.25}));
    CHECK(predict_reward(psi_s, psi_a, z).item() == 0.25);
  }
  SUBCASE("finite on random inputs") {
    for (int i = 0; i < 1000; ++i) {
      const auto r = predict_reward(random_tensor({1, 8}, rng, 5.0), random_tensor({1, 8}, rng, 5.0), p);
      CHECK(std::isfinite(r.item()));
    }
  }
  SUBCASE("gradient") {
    const std::vector<Tensor> in{psi_s, psi_a, p.get("reward_net.l1.w"), p.get("reward_net.l1.b"),
                                 p.get("reward_net.l2.w"), p.get("reward_net.l2.b")};
    auto f = [&](const std::vector<Tensor>& x) {
      ParamSet q = p;
      q.set("reward_net.l1.w", x[2]);
      q.set("reward_net.l1.b", x[3]);
      q.set("reward_net.l2.w", x[4]);
      q.set("reward_net.l2.b", x[5]);
      return pow(predict_reward(x[0], x[1], q), 2.0);
    };
    CHECK(gradcheck(f, in) < 1e-4);
  }
}

TEST_CASE("action head") {
  auto rng = make_rng(58);
  auto cfg = tiny();
  const auto p = init_params(cfg, rng);
  const auto psi_a = random_tensor({1, 8}, rng);
  const auto r = Tensor::matrix(1, 1, {0.7});

  SUBCASE("one item gets all probability") {
    cfg.catalog = 1;
    auto rng1 = make_rng(5);
    const auto p1 = init_params(cfg, rng1);
    const auto logits = predict_action(psi_a, r, p1);
    CHECK(logits.shape() == Shape{1, 1});
    const std::vector<std::size_t> target{0};
    CHECK(cross_entropy(logits, target).item() == doctest::Approx(0.0));
  }
  SUBCASE("constant shift leaves argmax and gradient unchanged") {
    const auto logits = predict_action(psi_a, r, p);
    const auto shifted = add(logits, Tensor::scalar(3.5));
    const auto d = logits.data(), s = shifted.data();
    CHECK(std::max_element(d.begin(), d.end()) - d.begin() == std::max_element(s.begin(), s.end()) - s.begin());
    const std::vector<std::size_t> target{2};
    Graph g1, g2;
    const auto l1 = g1.leaf(logits), l2 = g2.leaf(shifted);
    const auto a = g1.backward(cross_entropy(l1, target)).of(l1);
    const auto b = g2.backward(cross_entropy(l2, target)).of(l2);
    CHECK(max_abs_diff(a.data(), b.data()) < 1e-12);
  }
  SUBCASE("gradient") {
    const std::vector<Tensor> in{psi_a, r, p.get("action_net.l1.w"), p.get("action_net.l1.b"),
                                 p.get("action_net.l2.w"), p.get("action_net.l2.b")};
    const std::vector<std::size_t> target{3};
    auto f = [&](const std::vector<Tensor>& x) {
      ParamSet q = p;
      q.set("action_net.l1.w", x[2]);
      q.set("action_net.l1.b", x[3]);
      q.set("action_net.l2.w", x[4]);
      q.set("action_net.l2.b", x[5]);
      return cross_entropy(predict_action(x[0], x[1], q), target);
    };
    CHECK(gradcheck(f, in) < 1e-4);
  }
}

TEST_CASE("output shapes over a grid") {
  auto rng = make_rng(59);
  for (std::size_t context : {1u, 3u, 6u}) {
    for (std::size_t layers : {1u, 2u}) {
      for (std::size_t heads : {1u, 2u, 4u}) {
        auto cfg = tiny(context);
        cfg.layers = layers;
        cfg.heads = heads;
        const auto p = init_params(cfg, rng);
        const auto traj = random_traj(8, cfg, rng);
        for (std::size_t m = 1; m <= context; ++m) {
          const auto out = forward(build_segment(traj, 7, context, m), p, cfg);
          CHECK(out.logits.shape() == Shape{1, cfg.catalog});
          CHECK(out.reward.numel() == 1);
          CHECK(out.psi_a.shape() == Shape{1, 8});
        }
      }
    }
  }
}

TEST_CASE("forward agrees across retention modes") {
  auto rng = make_rng(60);
  auto cfg = tiny(6);
  const auto p = init_params(cfg, rng);
  const auto traj = random_traj(12, cfg, rng);
  for (int trial = 0; trial < 10; ++trial) {
    const auto t = uniform_index(rng, traj.size());
    const auto seg = build_segment(traj, t, cfg.context, sample_mask(t, cfg.context, rng));
    cfg.mode = RetentionMode::parallel;
    const auto ref = forward(seg, p, cfg);
    for (auto mode : {RetentionMode::recurrent, RetentionMode::chunkwise}) {
      cfg.mode = mode;
      for (std::size_t seg_len : {1u, 4u, 18u, 20u}) {
        cfg.segment_len = seg_len;
        const auto out = forward(seg, p, cfg);
        CHECK(max_abs_diff(out.logits.data(), ref.logits.data()) < 1e-6);
        CHECK(std::abs(out.reward.item() - ref.reward.item()) < 1e-6);
      }
    }
  }
}

TEST_CASE("batch forward stacks single forwards") {
  auto rng = make_rng(61);
  const auto cfg = tiny();
  const auto p = init_params(cfg, rng);
  const auto traj = random_traj(10, cfg, rng);
  std::vector<MaskedSegment> segs;
  for (std::size_t t : {0u, 3u, 9u}) segs.push_back(build_segment(traj, t, cfg.context, std::min<std::size_t>(t + 1, 2)));
  const auto b = forward_batch(segs, p, cfg);
  CHECK(b.logits.shape() == Shape{3, 5});
  CHECK(b.rewards.shape() == Shape{3, 1});
  for (std::size_t i = 0; i < 3; ++i) {
    const auto one = forward(segs[i], p, cfg);
    for (std::size_t c = 0; c < 5; ++c) CHECK(b.logits.at(i, c) == one.logits[c]);
  }
  CHECK_THROWS(forward_batch(std::span<const MaskedSegment>{}, p, cfg));
}

TEST_CASE("segment and model mismatches are rejected") {
  auto rng = make_rng(62);
  const auto cfg = tiny();
  const auto p = init_params(cfg, rng);
  const auto traj = random_traj(10, cfg, rng);
  CHECK_THROWS_AS(forward(build_segment(traj, 5, 3, 2), p, cfg), DimensionError);
  auto seg = build_segment(traj, 5, 4, 4);
  seg.actions[1] = 99;
  CHECK_THROWS(forward(seg, p, cfg));
}

TEST_CASE("full model gradient") {
  auto rng = make_rng(63);
  auto cfg = tiny(3);
  cfg.d_h = 4;
  cfg.heads = 1;
  cfg.layers = 1;
  cfg.mode = RetentionMode::chunkwise;
  cfg.segment_len = 4;
  const auto p = init_params(cfg, rng);
  const auto traj = random_traj(6, cfg, rng);
  const std::vector<MaskedSegment> segs{build_segment(traj, 5, 3, 2), build_segment(traj, 1, 3, 2)};
  std::vector<Tensor> in;
  for (const auto& [_, t] : p.entries()) in.push_back(t);
  auto f = [&](const std::vector<Tensor>& x) {
    ParamSet q = p;
    std::size_t i = 0;
    for (const auto& [name, _] : p.entries()) q.set(name, x[i++]);
    const auto out = forward_batch(segs, q, cfg);
    const std::vector<std::size_t> targets{segs[0].target_action, segs[1].target_action};
    const auto r = Tensor::matrix(2, 1, {segs[0].target_reward, segs[1].target_reward});
    return add(mean(pow(sub(out.rewards, r), 2.0)), cross_entropy(out.logits, targets));
  };
  const auto a = analytic_grad(f, in);
  const auto n = numeric_grad([&](const std::vector<Tensor>& x) { return f(x).item(); }, in);
  std::size_t i = 0;
  for (const auto& [name, _] : p.entries()) {
    CAPTURE(name);
    CHECK(rel_error(a[i], n[i]) < 1e-4);
    ++i;
  }
}

TEST_CASE("inference segment and act") {
  auto rng = make_rng(64);
  const auto cfg = tiny(3);
  const auto p = init_params(cfg, rng);
  const auto traj = random_traj(6, cfg, rng);
  const std::vector<Step> history(traj.steps().begin(), traj.steps().begin() + 4);
  const auto& state = traj[4].state;

  SUBCASE("t=0 exposes only the first state and return") {
    const auto seg = inference_segment({}, state, 7.0, cfg);
    CHECK(seg.t == 0);
    CHECK(seg.m == 1);
    CHECK(seg.visible_count() == 2);
    CHECK(seg.is_visible(2, Token::state));
    CHECK(seg.is_visible(2, Token::rtg));
    CHECK(seg.rtg[2] == 7.0);
    CHECK(seg.states[2] == state);
  }
  SUBCASE("return slot subtracts rewards before the window") {
    const auto seg = inference_segment(history, state, 10.0, cfg);
    CHECK(seg.m == 3);
    CHECK(seg.visible_count() == 6);
    CHECK(seg.rtg[0] == 10.0 - history[0].reward - history[1].reward);
    CHECK(seg.actions[0] == history[2].action);
  }
  SUBCASE("greedy is deterministic and sampling is seeded") {
    const auto a = act(history, state, 10.0, p, cfg);
    CHECK(a < cfg.catalog);
    CHECK(act(history, state, 10.0, p, cfg) == a);
    auto r1 = make_rng(3), r2 = make_rng(3);
    CHECK(act(history, state, 10.0, p, cfg, &r1) == act(history, state, 10.0, p, cfg, &r2));
  }
}

TEST_CASE("checkpoint round trip") {
  ScratchDir dir("model");
  auto rng = make_rng(65);
  Checkpoint ck;
  ck.config = tiny();
  ck.params = init_params(ck.config, rng);
  ck.state = {{"step", 12}, {"seed", 3}};
  ck.extra.add("adam.m/embed.mask", random_tensor({1, 8}, rng));
  save_checkpoint(dir / "a.ckpt", ck);
  const auto back = load_checkpoint(dir / "a.ckpt");
  CHECK(back.config == ck.config);
  CHECK(back.state == ck.state);
  REQUIRE(back.params.size() == ck.params.size());
  for (const auto& [name, t] : ck.params.entries()) {
    const auto& u = back.params.get(name);
    CHECK(u.shape() == t.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) CHECK(std::bit_cast<std::uint64_t>(u[i]) == std::bit_cast<std::uint64_t>(t[i]));
  }
  CHECK(values(back.extra.get("adam.m/embed.mask")) == values(ck.extra.get("adam.m/embed.mask")));
  save_checkpoint(dir / "b.ckpt", back);
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
}

TEST_CASE("checkpoint load errors") {
  ScratchDir dir("model");
  auto rng = make_rng(66);
  Checkpoint ck;
  ck.config = tiny();
  ck.params = init_params(ck.config, rng);
  save_checkpoint(dir / "a.ckpt", ck);
  const auto bytes = slurp(dir / "a.ckpt");

  spit(dir / "trunc.ckpt", bytes.substr(0, bytes.size() - 20));
  CHECK_THROWS(load_checkpoint(dir / "trunc.ckpt"));
  spit(dir / "junk.ckpt", "hello\n");
  CHECK_THROWS(load_checkpoint(dir / "junk.ckpt"));
  CHECK_THROWS(load_checkpoint(dir / "missing.ckpt"));

  auto other = ck;
  other.config.catalog = 6;
  save_checkpoint(dir / "mismatch.ckpt", other);
  CHECK_THROWS(load_checkpoint(dir / "mismatch.ckpt"));
}
