// SPDX-License-Identifier: Apache-2.0
//
// The decision network: token embedding of a masked segment, L pre-norm
// retention blocks, the causal layer that pools visible rows into action and
// state representations, and the reward (N_e) and action (N_g) heads.

#pragma once

#include "maskrdt/numerics.hpp"
#include "maskrdt/random.hpp"
#include "maskrdt/retention.hpp"
#include "maskrdt/trajectory.hpp"

#include <nlohmann/json.hpp>

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace maskrdt {

struct ModelConfig {
  std::size_t d_h = 32;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t context = 8;
  std::size_t segment_len = 8;  // chunkwise retention only
  std::size_t state_dim = 8;
  std::size_t catalog = 20;
  std::size_t ffn_mult = 4;
  std::size_t horizon = 20;  // episode length; scales the RTG value and timestep features
  double dropout = 0.1;
  RetentionMode mode = RetentionMode::parallel;

  void validate() const;
  std::size_t tokens() const { return 3 * context; }
  RetentionConfig retention() const { return RetentionConfig(d_h, heads); }

  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

// Named tensors in insertion order.
class ParamSet {
 public:
  void add(std::string name, Tensor value);
  void set(std::string_view name, Tensor value);
  const Tensor& get(std::string_view name) const;
  bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

  // Copy with every tensor registered as a leaf of `g`.
  ParamSet on_graph(Graph& g) const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

ParamSet init_params(const ModelConfig& cfg, Rng& rng);

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;  // dropout masks; required when training with dropout > 0
};

Tensor embed(const MaskedSegment& seg, const ParamSet& p, const ModelConfig& cfg);
Tensor block(const Tensor& h, const ParamSet& p, const ModelConfig& cfg, std::size_t layer);

struct CausalOutput {
  Tensor psi_a;  // 1×d_h
  Tensor psi_s;  // 1×d_h
};

CausalOutput causal_layer(const Tensor& h, const MaskedSegment& seg, const ParamSet& p, const ModelConfig& cfg,
                          const ForwardOptions& opts = {});
Tensor predict_reward(const Tensor& psi_s, const Tensor& psi_a, const ParamSet& p);
Tensor predict_action(const Tensor& psi_a, const Tensor& reward, const ParamSet& p);

struct ModelOutput {
  Tensor reward;  // 1×1
  Tensor logits;  // 1×catalog
  Tensor psi_a;
  Tensor psi_s;
};

ModelOutput forward(const MaskedSegment& seg, const ParamSet& p, const ModelConfig& cfg,
                    const ForwardOptions& opts = {});

struct BatchOutput {
  Tensor rewards;  // B×1
  Tensor logits;   // B×catalog
};

BatchOutput forward_batch(std::span<const MaskedSegment> segs, const ParamSet& p, const ModelConfig& cfg,
                          const ForwardOptions& opts = {});

// Fully exposed window over the last min(C, t+1) steps whose first RTG slot
// holds target_return minus the rewards earned before the window. Greedy
// argmax unless `rng` is given, in which case the action is sampled.
MaskedSegment inference_segment(std::span<const Step> history, std::span<const double> state, double target_return,
                                const ModelConfig& cfg);
std::size_t act(std::span<const Step> history, std::span<const double> state, double target_return,
                const ParamSet& p, const ModelConfig& cfg, Rng* rng = nullptr);

// ---- checkpoint -----------------------------------------------------------

struct Checkpoint {
  ModelConfig config;
  ParamSet params;
  nlohmann::ordered_json state;  // free-form training state
  ParamSet extra;                // e.g. optimizer moments
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace maskrdt
