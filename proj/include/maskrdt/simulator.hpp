// SPDX-License-Identifier: Apache-2.0
//
// Synthetic recommendation environment. A hidden unit-norm user preference
// drifts toward the items it is shown; clicks are Bernoulli with probability
// sigmoid(sharpness * <preference, item>). The observable state is a noisy
// view of the preference plus a decaying summary of clicked items.

#pragma once

#include "maskrdt/random.hpp"
#include "maskrdt/trajectory.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

namespace maskrdt {

struct SimConfig {
  std::size_t state_dim = 8;
  std::size_t catalog = 20;
  std::size_t episode_len = 20;
  double drift = 0.1;
  double noise = 0.05;       // preference random walk
  double obs_noise = 0.1;    // observation noise
  double sharpness = 5.0;    // kappa
  double history_decay = 0.7;
  double r_max = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

class ItemCatalog {
 public:
  ItemCatalog() = default;
  ItemCatalog(std::size_t count, std::size_t dim, std::vector<double> rows);

  // Random unit vectors derived from the simulator seed.
  static ItemCatalog generate(const SimConfig& cfg);

  std::size_t size() const { return count_; }
  std::size_t dim() const { return dim_; }
  std::span<const double> operator[](std::size_t i) const { return {rows_.data() + i * dim_, dim_}; }
  const std::vector<double>& rows() const { return rows_; }

  bool operator==(const ItemCatalog&) const = default;

 private:
  std::size_t count_ = 0;
  std::size_t dim_ = 0;
  std::vector<double> rows_;
};

void write_items(const ItemCatalog& items, const std::filesystem::path& path);
ItemCatalog read_items(const std::filesystem::path& path);

struct SimState {
  std::vector<double> preference;   // hidden
  std::vector<double> history;      // decayed sum of clicked item vectors
  std::vector<double> observation;  // what Step::state records
  std::size_t step = 0;
};

SimState reset(const SimConfig& cfg, Rng& rng);

struct Transition {
  SimState next;
  double reward = 0.0;
};

Transition step(const SimConfig& cfg, const SimState& state, std::size_t action, const ItemCatalog& items, Rng& rng);

// Greedy on <observation, item> with probability 1 - eps, uniform otherwise.
std::size_t oracle_policy(std::span<const double> observation, const ItemCatalog& items, double eps, Rng& rng);

struct PolicyContext {
  std::span<const Step> history;  // completed steps of this episode
  std::span<const double> state;  // current observation
  const ItemCatalog& items;
  std::size_t t;
};

// Must be safe to call concurrently from several rollout workers.
using Policy = std::function<std::size_t(const PolicyContext&, Rng&)>;

Policy make_oracle_policy(double eps);
Policy make_uniform_policy();

struct RolloutResult {
  std::vector<Trajectory> trajectories;
  std::vector<double> ctr;
  double mean_ctr = 0.0;
  double std_ctr = 0.0;
};

// Episode e uses environment and policy streams keyed by (seed, e), so results
// do not depend on the worker count.
RolloutResult rollout(const Policy& policy, const SimConfig& cfg, const ItemCatalog& items, std::size_t episodes,
                      std::uint64_t seed, double gamma = 1.0, std::size_t threads = 0);

// MASKRDT_THREADS if set, else hardware concurrency.
std::size_t worker_threads();

}  // namespace maskrdt
