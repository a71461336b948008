// SPDX-License-Identifier: Apache-2.0

#include "maskrdt/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>

namespace maskrdt {

namespace {

constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kStepStream = 0x57e9;
constexpr std::uint64_t kProbeStream = 0x9b0be;

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw std::invalid_argument("TrainConfig: lr must be non-negative");
  if (!(beta >= 0.0)) throw std::invalid_argument("TrainConfig: beta must be non-negative");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (!(grad_clip > 0.0)) throw std::invalid_argument("TrainConfig: grad_clip must be positive");
  if (eval_every < 1) throw std::invalid_argument("TrainConfig: eval_every must be >= 1");
}

// ---- losses ---------------------------------------------------------------

double loss_reward(std::span<const double> targets, std::span<const double> predicted) {
  if (targets.empty()) throw std::invalid_argument("loss_reward: empty batch");
  if (targets.size() != predicted.size()) throw DimensionError("loss_reward: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) s += (targets[i] - predicted[i]) * (targets[i] - predicted[i]);
  return s / static_cast<double>(targets.size());
}

double loss_action(std::span<const std::size_t> targets, std::span<const double> logits, std::size_t classes) {
  if (classes == 0 || logits.size() != targets.size() * classes) throw DimensionError("loss_action: shape mismatch");
  return cross_entropy(Tensor::matrix(targets.size(), classes, {logits.begin(), logits.end()}), targets).item();
}

Tensor loss_reward(const Tensor& predicted, std::span<const double> targets) {
  if (targets.empty()) throw std::invalid_argument("loss_reward: empty batch");
  if (predicted.numel() != targets.size()) throw DimensionError("loss_reward: length mismatch");
  const Tensor diff = sub(predicted, Tensor(predicted.shape(), {targets.begin(), targets.end()}));
  return mean(mul(diff, diff));
}

Tensor loss_action(const Tensor& logits, std::span<const std::size_t> targets) { return cross_entropy(logits, targets); }

Tensor total_loss(const Tensor& l_e, const Tensor& l_g, double beta) {
  if (beta == 0.0) return l_e;
  return add(l_e, scale(l_g, beta));
}

double clip_gradients(std::vector<std::vector<double>>& grads, double clip) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double v : g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > clip) {
    const double f = clip / norm;
    for (auto& g : grads)
      for (double& v : g) v *= f;
  }
  return norm;
}

// ---- optimizer ------------------------------------------------------------

AdamW::AdamW(const ParamSet& like, double lr, double weight_decay) : lr_(lr), wd_(weight_decay) {
  for (const auto& [name, t] : like.entries()) {
    names_.push_back(name);
    shapes_.push_back(t.shape());
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void AdamW::step(ParamSet& params, const std::vector<std::vector<double>>& grads) {
  if (grads.size() != names_.size()) throw DimensionError("AdamW: gradient count mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < names_.size(); ++i) {
    const Tensor& cur = params.get(names_[i]);
    auto x = cur.data();
    std::vector<double> next(x.begin(), x.end());
    auto& m = m_[i];
    auto& v = v_[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < next.size(); ++k) {
      m[k] = b1_ * m[k] + (1.0 - b1_) * g[k];
      v[k] = b2_ * v[k] + (1.0 - b2_) * g[k] * g[k];
      const double mh = m[k] / c1, vh = v[k] / c2;
      next[k] -= lr_ * (mh / (std::sqrt(vh) + eps_) + wd_ * next[k]);
    }
    params.set(names_[i], Tensor(cur.shape(), std::move(next)));
  }
}

ParamSet AdamW::export_state() const {
  ParamSet out;
  for (std::size_t i = 0; i < names_.size(); ++i) out.add("adam.m/" + names_[i], Tensor(shapes_[i], m_[i]));
  for (std::size_t i = 0; i < names_.size(); ++i) out.add("adam.v/" + names_[i], Tensor(shapes_[i], v_[i]));
  return out;
}

void AdamW::import_state(const ParamSet& state, std::size_t steps) {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    const auto& m = state.get("adam.m/" + names_[i]);
    const auto& v = state.get("adam.v/" + names_[i]);
    if (m.shape() != shapes_[i] || v.shape() != shapes_[i]) throw DimensionError("AdamW: moment shape mismatch");
    m_[i].assign(m.data().begin(), m.data().end());
    v_[i].assign(v.data().begin(), v.data().end());
  }
  t_ = steps;
}

// ---- metrics log ----------------------------------------------------------

void write_metrics_header(std::ostream& out) { out << "step,loss_reward,loss_action,loss_total\n"; }

void write_metrics_row(std::ostream& out, const MetricsRow& row) {
  out << row.step << ',' << fmt_double(row.loss_reward) << ',' << fmt_double(row.loss_action) << ','
      << fmt_double(row.loss_total) << '\n';
}

// ---- loop -----------------------------------------------------------------

LossBreakdown evaluate_loss(std::span<const MaskedSegment> segs, const ParamSet& params, const ModelConfig& cfg,
                            double beta) {
  const auto out = forward_batch(segs, params, cfg);
  std::vector<double> rewards;
  std::vector<std::size_t> actions;
  for (const auto& s : segs) {
    rewards.push_back(s.target_reward);
    actions.push_back(s.target_action);
  }
  LossBreakdown lb;
  lb.reward = loss_reward(out.rewards, rewards).item();
  lb.action = loss_action(out.logits, actions).item();
  lb.total = lb.reward + beta * lb.action;
  return lb;
}

std::vector<MaskedSegment> sample_segments(const Dataset& data, const ModelConfig& mcfg, std::size_t count,
                                           bool adaptive_mask, Rng& rng) {
  const auto total = data.total_steps();
  if (total == 0) throw std::invalid_argument("sample_segments: empty dataset");
  std::vector<std::size_t> ends;
  ends.reserve(data.trajectories.size());
  std::size_t acc = 0;
  for (const auto& tr : data.trajectories) ends.push_back(acc += tr.size());
  std::vector<MaskedSegment> segs;
  segs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto flat = uniform_index(rng, total);
    const auto ti = static_cast<std::size_t>(std::upper_bound(ends.begin(), ends.end(), flat) - ends.begin());
    const auto t = flat - (ti == 0 ? 0 : ends[ti - 1]);
    const auto m = adaptive_mask ? sample_mask(t, mcfg.context, rng) : std::min(mcfg.context, t + 1);
    segs.push_back(build_segment(data.trajectories[ti], t, mcfg.context, m, mcfg.horizon));
  }
  return segs;
}

Checkpoint make_checkpoint(const TrainResult& result, const ModelConfig& mcfg, const TrainConfig& tcfg) {
  Checkpoint c;
  c.config = mcfg;
  c.params = result.params;
  c.extra = result.optimizer.export_state();
  c.state["step"] = result.steps_done;
  c.state["seed"] = tcfg.seed;
  return c;
}

ResumeState resume_state(const Checkpoint& ckpt) {
  ResumeState r;
  r.params = ckpt.params;
  r.optimizer = ckpt.extra;
  r.step = ckpt.state.value("step", std::size_t{0});
  return r;
}

TrainResult train(const Dataset& data, const ModelConfig& mcfg, const TrainConfig& tcfg, const ResumeState* resume,
                  const std::function<void(const MetricsRow&)>& on_row) {
  mcfg.validate();
  tcfg.validate();
  if (data.trajectories.empty()) throw std::invalid_argument("train: dataset is empty");
  if (data.state_dim != mcfg.state_dim || data.catalog != mcfg.catalog) {
    throw DimensionError("train: dataset state_dim/catalog do not match the model config");
  }

  TrainResult res;
  std::size_t start = 0;
  if (resume != nullptr) {
    res.params = resume->params;
    res.optimizer = AdamW(res.params, tcfg.lr, tcfg.weight_decay);
    res.optimizer.import_state(resume->optimizer, resume->step);
    start = resume->step;
  } else {
    Rng init = make_rng(tcfg.seed, {kInitStream});
    res.params = init_params(mcfg, init);
    res.optimizer = AdamW(res.params, tcfg.lr, tcfg.weight_decay);
  }

  Rng probe_rng = make_rng(tcfg.seed, {kProbeStream});
  const auto probe = sample_segments(data, mcfg, std::max<std::size_t>(tcfg.probe_size, 1), tcfg.adaptive_mask, probe_rng);
  res.initial_loss = evaluate_loss(probe, res.params, mcfg, tcfg.beta).total;

  std::vector<double> rewards(tcfg.batch_size);
  std::vector<std::size_t> actions(tcfg.batch_size);
  for (std::size_t k = start; k < tcfg.steps; ++k) {
    Rng rng = make_rng(tcfg.seed, {kStepStream, k});
    const auto segs = sample_segments(data, mcfg, tcfg.batch_size, tcfg.adaptive_mask, rng);
    for (std::size_t i = 0; i < segs.size(); ++i) {
      rewards[i] = segs[i].target_reward;
      actions[i] = segs[i].target_action;
    }

    MetricsRow row;
    std::vector<std::vector<double>> grads;
    try {
      Graph g;
      const ParamSet tracked = res.params.on_graph(g);
      const ForwardOptions opts{true, &rng};
      const auto out = forward_batch(segs, tracked, mcfg, opts);
      const Tensor l_e = loss_reward(out.rewards, rewards);
      const Tensor l_g = loss_action(out.logits, actions);
      const Tensor total = total_loss(l_e, l_g, tcfg.beta);
      row = {k, l_e.item(), l_g.item(), total.item()};
      const auto gm = g.backward(total);
      grads.reserve(tracked.size());
      for (const auto& [_, t] : tracked.entries()) {
        const auto gt = gm.of(t);
        grads.emplace_back(gt.data().begin(), gt.data().end());
      }
      clip_gradients(grads, tcfg.grad_clip);
      double sq = 0.0;
      for (const auto& gv : grads)
        for (double v : gv) sq += v * v;
      res.last_grad_norm = std::sqrt(sq);
      ParamSet next = res.params;
      AdamW opt = res.optimizer;
      opt.step(next, grads);
      for (const auto& [_, t] : next.entries()) check_finite(t.data(), "optimizer update");
      res.params = std::move(next);
      res.optimizer = std::move(opt);
    } catch (const NumericError&) {
      res.diverged = true;
      res.steps_done = k;
      return res;
    }

    res.step_losses.push_back(row.loss_total);
    if (k % tcfg.eval_every == 0 || k + 1 == tcfg.steps) {
      res.log.push_back(row);
      if (on_row) on_row(row);
    }
  }
  res.steps_done = std::max(start, tcfg.steps);
  res.final_loss = evaluate_loss(probe, res.params, mcfg, tcfg.beta).total;
  return res;
}

}  // namespace maskrdt
