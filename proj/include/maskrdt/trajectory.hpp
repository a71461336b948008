// SPDX-License-Identifier: Apache-2.0
//
// Episodes, returns-to-go, masked context windows and the line-delimited
// dataset file.

#pragma once

#include "maskrdt/random.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace maskrdt {

struct Step {
  std::vector<double> state;
  std::size_t action = 0;
  double reward = 0.0;

  bool operator==(const Step&) const = default;
};

std::vector<double> compute_rtg(std::span<const double> rewards, double gamma);

class Trajectory {
 public:
  Trajectory(std::uint64_t id, std::vector<Step> steps, double gamma = 1.0);

  std::uint64_t id() const { return id_; }
  const std::vector<Step>& steps() const { return steps_; }
  const std::vector<double>& rtg() const { return rtg_; }
  std::size_t size() const { return steps_.size(); }
  const Step& operator[](std::size_t t) const { return steps_[t]; }

  bool operator==(const Trajectory& o) const { return id_ == o.id_ && steps_ == o.steps_ && rtg_ == o.rtg_; }

 private:
  std::uint64_t id_;
  std::vector<Step> steps_;
  std::vector<double> rtg_;
};

// Uniform on [1, min(C, t+1)].
std::size_t sample_mask(std::size_t t, std::size_t context, Rng& rng);

enum class Token : std::size_t { state = 0, action = 1, rtg = 2 };

// A window of C timesteps ending at t, laid out as 3C token slots with slot
// 3j + token for window offset j (timestep t - C + 1 + j).
struct MaskedSegment {
  std::size_t context = 0;
  std::size_t t = 0;
  std::size_t m = 0;
  std::size_t horizon = 0;  // episode length the timestep feature is scaled by

  // Per-window-offset contents; offsets before the episode start hold zeros.
  std::vector<std::vector<double>> states;
  std::vector<std::size_t> actions;
  std::vector<double> rtg;
  std::vector<bool> visible;

  std::size_t target_action = 0;
  double target_reward = 0.0;
  std::optional<std::vector<double>> target_next_state;

  static std::size_t slot(std::size_t offset, Token token) { return 3 * offset + static_cast<std::size_t>(token); }
  bool is_visible(std::size_t offset, Token token) const { return visible[slot(offset, token)]; }
  std::size_t visible_count() const;
  std::size_t tokens() const { return 3 * context; }
  // Window offset of the earliest visible timestep, t - m + 1.
  std::size_t first_visible_offset() const { return context - m; }
  // Number of offsets that precede the episode start.
  std::size_t padding() const { return t + 1 >= context ? 0 : context - (t + 1); }
};

MaskedSegment build_segment(const Trajectory& traj, std::size_t t, std::size_t context, std::size_t m,
                            std::size_t horizon = 0);

// ---- dataset file ---------------------------------------------------------

struct DatasetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Dataset {
  std::size_t state_dim = 0;
  std::size_t catalog = 0;
  double r_max = 1.0;
  double gamma = 1.0;
  std::vector<Trajectory> trajectories;

  std::size_t total_steps() const;
};

void write_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace maskrdt
