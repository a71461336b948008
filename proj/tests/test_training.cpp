// SPDX-License-Identifier: Apache-2.0

#include "maskrdt/simulator.hpp"
#include "maskrdt/training.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <sstream>
#include <vector>

using namespace maskrdt;
using namespace maskrdt::test;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.d_h = 8;
  c.heads = 2;
  c.layers = 1;
  c.context = 4;
  c.segment_len = 4;
  c.state_dim = 4;
  c.catalog = 6;
  c.ffn_mult = 2;
  c.horizon = 10;
  c.dropout = 0.1;
  return c;
}

Dataset tiny_data(std::size_t episodes = 50) {
  SimConfig sim;
  sim.state_dim = 4;
  sim.catalog = 6;
  sim.episode_len = 10;
  sim.seed = 5;
  const auto items = ItemCatalog::generate(sim);
  Dataset d;
  d.state_dim = 4;
  d.catalog = 6;
  d.trajectories = rollout(make_oracle_policy(0.1), sim, items, episodes, 5, 1.0, 1).trajectories;
  return d;
}

TrainConfig quick(std::size_t steps) {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = 8;
  t.eval_every = 5;
  t.probe_size = 64;
  t.seed = 11;
  return t;
}

std::vector<double> flat(const ParamSet& p) {
  std::vector<double> out;
  for (const auto& [_, t] : p.entries()) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

}  // namespace

TEST_CASE("reward loss") {
  const std::vector<double> r{1, 0}, zero{0, 0};
  CHECK(loss_reward(r, r) == 0.0);
  CHECK(loss_reward(r, zero) == 0.5);
  const std::vector<double> rr{1, 0, 1, 0}, zz{0, 0, 0, 0};
  CHECK(loss_reward(rr, zz) == loss_reward(r, zero));
  CHECK_THROWS(loss_reward(std::vector<double>{}, std::vector<double>{}));
  CHECK_THROWS(loss_reward(r, std::vector<double>{1.0}));
  CHECK(loss_reward(Tensor::matrix(2, 1, {0, 0}), r).item() == 0.5);
}

TEST_CASE("action loss") {
  const std::vector<std::size_t> target{2};
  CHECK(loss_action(target, std::vector<double>(4, 0.3), 4) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  double prev = loss_action(target, std::vector<double>{0, 0, 0, 0}, 4);
  for (double z : {1.0, 5.0, 10.0, 20.0}) {
    const double cur = loss_action(target, std::vector<double>{0, 0, z, 0}, 4);
    CHECK(cur < prev);
    prev = cur;
  }
  CHECK(prev < 1e-8);
  const double a = loss_action(target, std::vector<double>{0.1, -2.0, 1.0, 3.0}, 4);
  const double b = loss_action(target, std::vector<double>{3.0, 0.1, 1.0, -2.0}, 4);
  CHECK(a == doctest::Approx(b).epsilon(1e-14));
  CHECK_THROWS(loss_action(std::vector<std::size_t>{4}, std::vector<double>(4, 0.0), 4));
  CHECK_THROWS(loss_action(target, std::vector<double>(3, 0.0), 4));
}

TEST_CASE("total loss") {
  const auto le = Tensor::scalar(0.5), lg = Tensor::scalar(1.0);
  CHECK(total_loss(le, lg, 1.0).item() == 1.5);
  CHECK(total_loss(le, lg, 0.0).item() == 0.5);
}

TEST_CASE("action network receives gradient only when beta > 0") {
  auto rng = make_rng(71);
  const auto cfg = tiny_model();
  const auto data = tiny_data(5);
  const auto p = init_params(cfg, rng);
  auto srng = make_rng(72);
  const auto segs = sample_segments(data, cfg, 4, true, srng);
  std::vector<double> rewards;
  std::vector<std::size_t> actions;
  for (const auto& s : segs) {
    rewards.push_back(s.target_reward);
    actions.push_back(s.target_action);
  }
  for (double beta : {0.0, 1.0}) {
    Graph g;
    const auto tracked = p.on_graph(g);
    const auto out = forward_batch(segs, tracked, cfg);
    const auto total = total_loss(loss_reward(out.rewards, rewards), loss_action(out.logits, actions), beta);
    const auto grads = g.backward(total);
    double an = 0.0, rn = 0.0;
    for (const auto& name : {"action_net.l1.w", "action_net.l2.w", "action_net.l2.b"})
      for (const Tensor gv = grads.of(tracked.get(name)); double v : gv.data()) an += v * v;
    for (const Tensor gv = grads.of(tracked.get("reward_net.l2.w")); double v : gv.data()) rn += v * v;
    CHECK(rn > 0.0);
    if (beta == 0.0) {
      CHECK(an == 0.0);
    } else {
      CHECK(an > 0.0);
    }
  }
}

TEST_CASE("gradient clipping") {
  std::vector<std::vector<double>> g{{3.0}, {4.0}};
  CHECK(clip_gradients(g, 1.0) == 5.0);
  CHECK(g[0][0] == doctest::Approx(0.6));
  CHECK(g[1][0] == doctest::Approx(0.8));
  std::vector<std::vector<double>> small{{0.3}, {0.4}};
  clip_gradients(small, 1.0);
  CHECK(small[0][0] == 0.3);
}

TEST_CASE("adamw") {
  ParamSet p;
  p.add("w", Tensor::matrix(1, 2, {1.0, -1.0}));
  AdamW opt(p, 0.1, 0.0);
  opt.step(p, {{1.0, -1.0}});
  // First bias-corrected step moves each coordinate by lr * sign(g).
  CHECK(p.get("w")[0] == doctest::Approx(0.9));
  CHECK(p.get("w")[1] == doctest::Approx(-0.9));
  CHECK(opt.steps() == 1);
  const auto st = opt.export_state();
  CHECK(st.contains("adam.m/w"));
  CHECK(st.contains("adam.v/w"));
  AdamW other(p, 0.1, 0.0);
  other.import_state(st, 1);
  auto p1 = p, p2 = p;
  opt.step(p1, {{0.5, 0.2}});
  other.step(p2, {{0.5, 0.2}});
  CHECK(flat(p1) == flat(p2));
  CHECK_THROWS(opt.step(p1, {}));
}

TEST_CASE("metrics rows") {
  std::ostringstream out;
  write_metrics_header(out);
  write_metrics_row(out, {3, 0.1, 0.25, 0.35});
  CHECK(out.str() == "step,loss_reward,loss_action,loss_total\n3,0.10000000000000001,0.25,0.34999999999999998\n");
}

TEST_CASE("train config validation") {
  auto t = quick(1);
  t.batch_size = 0;
  CHECK_THROWS(t.validate());
  t = quick(1);
  t.beta = -1.0;
  CHECK_THROWS(t.validate());
  t = quick(1);
  t.lr = -1e-3;
  CHECK_THROWS(t.validate());
}

TEST_CASE("train errors") {
  const auto cfg = tiny_model();
  Dataset empty;
  empty.state_dim = 4;
  empty.catalog = 6;
  CHECK_THROWS(train(empty, cfg, quick(1)));
  auto data = tiny_data(3);
  data.catalog = 7;
  CHECK_THROWS(train(data, cfg, quick(1)));
}

TEST_CASE("lr = 0 leaves parameters unchanged") {
  const auto cfg = tiny_model();
  const auto data = tiny_data(10);
  auto t = quick(5);
  t.lr = 0.0;
  t.weight_decay = 0.1;
  const auto res = train(data, cfg, t);
  auto none = t;
  none.steps = 0;
  const auto init = train(data, cfg, none);
  CHECK(init.step_losses.empty());
  CHECK(flat(res.params) == flat(init.params));
  CHECK(res.step_losses.size() == 5);
}

TEST_CASE("short training run reduces the loss and is deterministic") {
  const auto cfg = tiny_model();
  const auto data = tiny_data(50);
  auto t = quick(200);
  t.batch_size = 16;
  t.eval_every = 50;
  std::vector<MetricsRow> streamed;
  const auto a = train(data, cfg, t, nullptr, [&](const MetricsRow& r) { streamed.push_back(r); });
  CHECK_FALSE(a.diverged);
  CHECK(a.steps_done == 200);
  CHECK(a.final_loss < a.initial_loss);
  CHECK(a.log.size() == 5);  // steps 0, 50, 100, 150, 199
  CHECK(a.log.back().step == 199);
  CHECK(streamed == a.log);
  CHECK(a.last_grad_norm <= t.grad_clip + 1e-12);

  const auto b = train(data, cfg, t);
  CHECK(flat(a.params) == flat(b.params));
  CHECK(a.log == b.log);

  // Every parameter moved.
  auto none = t;
  none.steps = 0;
  const auto init = train(data, cfg, none).params;
  for (const auto& [name, p] : a.params.entries()) {
    CAPTURE(name);
    CHECK(max_abs_diff(p.data(), init.get(name).data()) > 0.0);
  }
}

TEST_CASE("resume continues an interrupted run exactly") {
  const auto cfg = tiny_model();
  const auto data = tiny_data(20);
  const auto full = train(data, cfg, quick(30));
  const auto half = train(data, cfg, quick(15));
  ScratchDir dir("train");
  save_checkpoint(dir / "half.ckpt", make_checkpoint(half, cfg, quick(15)));
  const auto ck = load_checkpoint(dir / "half.ckpt");
  const auto rs = resume_state(ck);
  CHECK(rs.step == 15);
  const auto resumed = train(data, ck.config, quick(30), &rs);
  CHECK(resumed.steps_done == 30);
  CHECK(max_abs_diff(flat(full.params), flat(resumed.params)) <= 1e-10);
  CHECK(resumed.optimizer.steps() == 30);
  std::vector<MetricsRow> tail(full.log.begin() + 3, full.log.end());
  CHECK(resumed.log == tail);
}

TEST_CASE("sample_segments respects the mask switch") {
  const auto cfg = tiny_model();
  const auto data = tiny_data(5);
  auto rng = make_rng(73);
  for (const auto& s : sample_segments(data, cfg, 200, false, rng)) CHECK(s.m == std::min(cfg.context, s.t + 1));
  bool partial = false;
  for (const auto& s : sample_segments(data, cfg, 200, true, rng)) partial |= s.m < std::min(cfg.context, s.t + 1);
  CHECK(partial);
}
