// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "maskrdt/model.hpp"
#include "maskrdt/trajectory.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

namespace maskrdt {

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double beta = 1.0;
  double grad_clip = 1.0;
  std::size_t batch_size = 32;
  std::size_t steps = 2000;
  std::size_t eval_every = 50;
  std::uint64_t seed = 0;
  bool adaptive_mask = true;  // false: always expose the whole window
  std::size_t probe_size = 256;

  void validate() const;
};

double loss_reward(std::span<const double> targets, std::span<const double> predicted);
double loss_action(std::span<const std::size_t> targets, std::span<const double> logits, std::size_t classes);

// Differentiable versions used by the training loop.
Tensor loss_reward(const Tensor& predicted, std::span<const double> targets);
Tensor loss_action(const Tensor& logits, std::span<const std::size_t> targets);
Tensor total_loss(const Tensor& l_e, const Tensor& l_g, double beta);

// Scales `grads` in place so their global L2 norm is at most `clip`; returns
// the norm before clipping.
double clip_gradients(std::vector<std::vector<double>>& grads, double clip);

class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParamSet& like, double lr, double weight_decay);

  void step(ParamSet& params, const std::vector<std::vector<double>>& grads);

  std::size_t steps() const { return t_; }
  // Moments as tensors named "adam.m/<param>" and "adam.v/<param>".
  ParamSet export_state() const;
  void import_state(const ParamSet& state, std::size_t steps);

 private:
  double lr_ = 1e-3, wd_ = 1e-4, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  std::size_t t_ = 0;
  std::vector<std::string> names_;
  std::vector<Shape> shapes_;
  std::vector<std::vector<double>> m_, v_;
};

struct MetricsRow {
  std::size_t step = 0;
  double loss_reward = 0.0;
  double loss_action = 0.0;
  double loss_total = 0.0;

  bool operator==(const MetricsRow&) const = default;
};

void write_metrics_header(std::ostream& out);
void write_metrics_row(std::ostream& out, const MetricsRow& row);

struct LossBreakdown {
  double reward = 0.0;
  double action = 0.0;
  double total = 0.0;
};

// Dropout off, no graph.
LossBreakdown evaluate_loss(std::span<const MaskedSegment> segs, const ParamSet& params, const ModelConfig& cfg,
                            double beta);

// Uniform (trajectory, t) pairs with masks drawn per the config.
std::vector<MaskedSegment> sample_segments(const Dataset& data, const ModelConfig& mcfg, std::size_t count,
                                           bool adaptive_mask, Rng& rng);

struct TrainResult {
  ParamSet params;
  AdamW optimizer;
  std::vector<MetricsRow> log;        // every eval_every steps and the last step
  std::vector<double> step_losses;    // training batch loss of each step run
  double initial_loss = 0.0;          // probe-set loss before training
  double final_loss = 0.0;            // probe-set loss after training
  std::size_t steps_done = 0;         // absolute step count reached
  double last_grad_norm = 0.0;        // post-clip
  bool diverged = false;
};

struct ResumeState {
  ParamSet params;
  ParamSet optimizer;
  std::size_t step = 0;
};

Checkpoint make_checkpoint(const TrainResult& result, const ModelConfig& mcfg, const TrainConfig& tcfg);
ResumeState resume_state(const Checkpoint& ckpt);

// Step k draws all of its randomness from a stream keyed by (seed, k), so a
// resumed run continues exactly where an uninterrupted one would be.
TrainResult train(const Dataset& data, const ModelConfig& mcfg, const TrainConfig& tcfg,
                  const ResumeState* resume = nullptr, const std::function<void(const MetricsRow&)>& on_row = {});

}  // namespace maskrdt
