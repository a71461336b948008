// SPDX-License-Identifier: Apache-2.0

#include "maskrdt/trajectory.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <sstream>

namespace maskrdt {

using ordered_json = nlohmann::ordered_json;

std::vector<double> compute_rtg(std::span<const double> rewards, double gamma) {
  if (rewards.empty()) throw std::invalid_argument("compute_rtg: empty reward sequence");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("compute_rtg: gamma must lie in [0, 1]");
  std::vector<double> rtg(rewards.size());
  rtg.back() = rewards.back();
  for (std::size_t t = rewards.size() - 1; t-- > 0;) rtg[t] = rewards[t] + gamma * rtg[t + 1];
  return rtg;
}

Trajectory::Trajectory(std::uint64_t id, std::vector<Step> steps, double gamma) : id_(id), steps_(std::move(steps)) {
  if (steps_.empty()) throw std::invalid_argument("trajectory must have at least one step");
  std::vector<double> rewards;
  rewards.reserve(steps_.size());
  for (const auto& s : steps_) rewards.push_back(s.reward);
  rtg_ = compute_rtg(rewards, gamma);
}

std::size_t sample_mask(std::size_t t, std::size_t context, Rng& rng) {
  if (context == 0) throw std::invalid_argument("sample_mask: context must be >= 1");
  const std::size_t hi = std::min(context, t + 1);
  return 1 + uniform_index(rng, hi);
}

std::size_t MaskedSegment::visible_count() const {
  return static_cast<std::size_t>(std::count(visible.begin(), visible.end(), true));
}

MaskedSegment build_segment(const Trajectory& traj, std::size_t t, std::size_t context, std::size_t m,
                            std::size_t horizon) {
  if (t >= traj.size()) {
    throw std::out_of_range("build_segment: t=" + std::to_string(t) + " outside episode of length " +
                            std::to_string(traj.size()));
  }
  if (context == 0 || m == 0 || m > std::min(context, t + 1)) {
    throw std::invalid_argument("build_segment: need 1 <= m <= min(C, t+1), got m=" + std::to_string(m));
  }
  MaskedSegment seg;
  seg.context = context;
  seg.t = t;
  seg.m = m;
  seg.horizon = horizon == 0 ? traj.size() : horizon;
  const std::size_t dim = traj[0].state.size();
  seg.states.assign(context, std::vector<double>(dim, 0.0));
  seg.actions.assign(context, 0);
  seg.rtg.assign(context, 0.0);
  seg.visible.assign(3 * context, false);

  const std::size_t pad = seg.padding();
  for (std::size_t j = pad; j < context; ++j) {
    const std::size_t k = t + 1 + j - context;  // timestep at offset j
    seg.states[j] = traj[k].state;
    seg.actions[j] = traj[k].action;
    seg.rtg[j] = traj.rtg()[k];
  }

  const std::size_t first = seg.first_visible_offset();
  for (std::size_t j = first; j < context; ++j) {
    seg.visible[MaskedSegment::slot(j, Token::state)] = true;
    if (j + 1 < context) seg.visible[MaskedSegment::slot(j, Token::action)] = true;
  }
  seg.visible[MaskedSegment::slot(first, Token::rtg)] = true;

  seg.target_action = traj[t].action;
  seg.target_reward = traj[t].reward;
  if (t + 1 < traj.size()) seg.target_next_state = traj[t + 1].state;
  return seg;
}

std::size_t Dataset::total_steps() const {
  std::size_t n = 0;
  for (const auto& tr : trajectories) n += tr.size();
  return n;
}

void write_dataset(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot open '" + path.string() + "' for writing");
  ordered_json header;
  header["format"] = "maskrdt-traj";
  header["version"] = 1;
  header["state_dim"] = data.state_dim;
  header["catalog"] = data.catalog;
  header["r_max"] = data.r_max;
  header["gamma"] = data.gamma;
  out << header.dump() << '\n';
  for (const auto& tr : data.trajectories) {
    ordered_json rec;
    rec["id"] = tr.id();
    auto steps = ordered_json::array();
    for (const auto& s : tr.steps()) {
      ordered_json js;
      js["s"] = s.state;
      js["a"] = s.action;
      js["r"] = s.reward;
      steps.push_back(std::move(js));
    }
    rec["steps"] = std::move(steps);
    out << rec.dump() << '\n';
  }
  if (!out) throw DatasetError("write to '" + path.string() + "' failed");
}

namespace {

[[noreturn]] void fail_line(std::size_t line, const std::string& what) {
  throw DatasetError("line " + std::to_string(line) + ": " + what);
}

}  // namespace

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) fail_line(1, "missing header");

  Dataset data;
  try {
    const auto header = ordered_json::parse(line);
    if (header.value("format", "") != "maskrdt-traj") fail_line(1, "not a maskrdt-traj file");
    if (header.at("version").get<int>() != 1) {
      fail_line(1, "unsupported version " + header.at("version").dump());
    }
    data.state_dim = header.at("state_dim").get<std::size_t>();
    data.catalog = header.at("catalog").get<std::size_t>();
    data.r_max = header.at("r_max").get<double>();
    data.gamma = header.value("gamma", 1.0);
  } catch (const nlohmann::json::exception& e) {
    fail_line(1, e.what());
  }

  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto rec = ordered_json::parse(line);
      std::vector<Step> steps;
      for (const auto& js : rec.at("steps")) {
        Step s;
        s.state = js.at("s").get<std::vector<double>>();
        s.action = js.at("a").get<std::size_t>();
        s.reward = js.at("r").get<double>();
        if (s.state.size() != data.state_dim) fail_line(lineno, "state dimension mismatch");
        if (s.action >= data.catalog) fail_line(lineno, "action outside catalog");
        if (!(s.reward >= 0.0 && s.reward <= data.r_max)) fail_line(lineno, "reward outside [0, r_max]");
        steps.push_back(std::move(s));
      }
      if (steps.empty()) fail_line(lineno, "trajectory without steps");
      data.trajectories.emplace_back(rec.at("id").get<std::uint64_t>(), std::move(steps), data.gamma);
    } catch (const nlohmann::json::exception& e) {
      fail_line(lineno, e.what());
    }
  }
  return data;
}

}  // namespace maskrdt
