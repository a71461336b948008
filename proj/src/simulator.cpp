// SPDX-License-Identifier: Apache-2.0

#include "maskrdt/simulator.hpp"

#include "maskrdt/metrics.hpp"
#include "maskrdt/numerics.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <stdexcept>
#include <thread>

namespace maskrdt {

namespace {

constexpr std::uint64_t kItemStream = 0x17e45;
constexpr std::uint64_t kEnvStream = 0xe1;
constexpr std::uint64_t kPolicyStream = 0x9a;

void normalize(std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n == 0.0) {
    v.assign(v.size(), 0.0);
    v[0] = 1.0;
    return;
  }
  for (double& x : v) x /= n;
}

std::vector<double> unit_vector(std::size_t dim, Rng& rng) {
  std::vector<double> v(dim);
  for (double& x : v) x = normal(rng);
  normalize(v);
  return v;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void observe(const SimConfig& cfg, SimState& s, Rng& rng) {
  s.observation.resize(cfg.state_dim);
  for (std::size_t i = 0; i < cfg.state_dim; ++i) {
    s.observation[i] = s.preference[i] + cfg.obs_noise * normal(rng) + s.history[i];
  }
}

}  // namespace

void SimConfig::validate() const {
  if (state_dim == 0) throw std::invalid_argument("SimConfig: state_dim must be >= 1");
  if (catalog < 2) throw std::invalid_argument("SimConfig: catalog must be >= 2");
  if (episode_len == 0) throw std::invalid_argument("SimConfig: episode_len must be >= 1");
  if (drift < 0.0 || noise < 0.0 || obs_noise < 0.0) throw std::invalid_argument("SimConfig: negative noise/drift");
  if (history_decay < 0.0 || history_decay >= 1.0) throw std::invalid_argument("SimConfig: history_decay in [0,1)");
  if (!(r_max > 0.0)) throw std::invalid_argument("SimConfig: r_max must be positive");
}

ItemCatalog::ItemCatalog(std::size_t count, std::size_t dim, std::vector<double> rows)
    : count_(count), dim_(dim), rows_(std::move(rows)) {
  if (rows_.size() != count_ * dim_) throw DimensionError("ItemCatalog: row data does not match count x dim");
}

ItemCatalog ItemCatalog::generate(const SimConfig& cfg) {
  cfg.validate();
  Rng rng = make_rng(cfg.seed, {kItemStream});
  std::vector<double> rows;
  rows.reserve(cfg.catalog * cfg.state_dim);
  for (std::size_t i = 0; i < cfg.catalog; ++i) {
    auto v = unit_vector(cfg.state_dim, rng);
    rows.insert(rows.end(), v.begin(), v.end());
  }
  return ItemCatalog(cfg.catalog, cfg.state_dim, std::move(rows));
}

void write_items(const ItemCatalog& items, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot open '" + path.string() + "' for writing");
  nlohmann::ordered_json header;
  header["format"] = "maskrdt-items";
  header["version"] = 1;
  header["catalog"] = items.size();
  header["d_s"] = items.dim();
  out << header.dump() << '\n';
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto row = items[i];
    out << nlohmann::json(std::vector<double>(row.begin(), row.end())).dump() << '\n';
  }
  if (!out) throw DatasetError("write to '" + path.string() + "' failed");
}

ItemCatalog read_items(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open '" + path.string() + "'");
  std::string line;
  std::size_t lineno = 0;
  try {
    std::getline(in, line);
    lineno = 1;
    const auto header = nlohmann::json::parse(line);
    if (header.value("format", "") != "maskrdt-items") throw DatasetError("line 1: not a maskrdt-items file");
    if (header.at("version").get<int>() != 1) throw DatasetError("line 1: unsupported version");
    const auto count = header.at("catalog").get<std::size_t>();
    const auto dim = header.at("d_s").get<std::size_t>();
    std::vector<double> rows;
    rows.reserve(count * dim);
    for (std::size_t i = 0; i < count; ++i) {
      if (!std::getline(in, line)) throw DatasetError("line " + std::to_string(lineno + 1) + ": missing item row");
      ++lineno;
      auto row = nlohmann::json::parse(line).get<std::vector<double>>();
      if (row.size() != dim) throw DatasetError("line " + std::to_string(lineno) + ": wrong item dimension");
      rows.insert(rows.end(), row.begin(), row.end());
    }
    return ItemCatalog(count, dim, std::move(rows));
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError("line " + std::to_string(lineno) + ": " + e.what());
  }
}

SimState reset(const SimConfig& cfg, Rng& rng) {
  cfg.validate();
  SimState s;
  s.preference = unit_vector(cfg.state_dim, rng);
  s.history.assign(cfg.state_dim, 0.0);
  s.step = 0;
  observe(cfg, s, rng);
  return s;
}

Transition step(const SimConfig& cfg, const SimState& state, std::size_t action, const ItemCatalog& items, Rng& rng) {
  if (action >= items.size()) {
    throw std::out_of_range("step: action " + std::to_string(action) + " outside catalog of " +
                            std::to_string(items.size()));
  }
  const auto item = items[action];
  const double p_click = sigmoid_value(cfg.sharpness * dot(state.preference, item));
  const bool click = uniform01(rng) < p_click;

  Transition tr;
  SimState& n = tr.next;
  n = state;
  n.step = state.step + 1;
  for (std::size_t i = 0; i < cfg.state_dim; ++i) {
    n.history[i] = cfg.history_decay * state.history[i] + (click ? (1.0 - cfg.history_decay) * item[i] : 0.0);
  }
  if (cfg.drift > 0.0 || cfg.noise > 0.0) {
    for (std::size_t i = 0; i < cfg.state_dim; ++i) {
      n.preference[i] += cfg.drift * item[i] + cfg.noise * normal(rng);
    }
    normalize(n.preference);
  }
  observe(cfg, n, rng);
  tr.reward = click ? cfg.r_max : 0.0;
  return tr;
}

std::size_t oracle_policy(std::span<const double> observation, const ItemCatalog& items, double eps, Rng& rng) {
  if (eps > 0.0 && uniform01(rng) < eps) return uniform_index(rng, items.size());
  std::size_t best = 0;
  double best_score = dot(observation, items[0]);
  for (std::size_t i = 1; i < items.size(); ++i) {
    const double s = dot(observation, items[i]);
    if (s > best_score) {
      best = i;
      best_score = s;
    }
  }
  return best;
}

Policy make_oracle_policy(double eps) {
  return [eps](const PolicyContext& ctx, Rng& rng) { return oracle_policy(ctx.state, ctx.items, eps, rng); };
}

Policy make_uniform_policy() {
  return [](const PolicyContext& ctx, Rng& rng) { return uniform_index(rng, ctx.items.size()); };
}

std::size_t worker_threads() {
  if (const char* env = std::getenv("MASKRDT_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

RolloutResult rollout(const Policy& policy, const SimConfig& cfg, const ItemCatalog& items, std::size_t episodes,
                      std::uint64_t seed, double gamma, std::size_t threads) {
  cfg.validate();
  if (items.size() != cfg.catalog || items.dim() != cfg.state_dim) {
    throw DimensionError("rollout: item catalog does not match the simulator config");
  }
  std::vector<std::vector<Step>> runs(episodes);
  std::vector<double> ctrs(episodes);

  auto run_episode = [&](std::size_t e) {
    Rng env = make_rng(seed, {kEnvStream, e});
    Rng pol = make_rng(seed, {kPolicyStream, e});
    SimState s = reset(cfg, env);
    auto& steps = runs[e];
    steps.reserve(cfg.episode_len);
    double ret = 0.0;
    for (std::size_t t = 0; t < cfg.episode_len; ++t) {
      const PolicyContext ctx{steps, s.observation, items, t};
      const std::size_t a = policy(ctx, pol);
      auto tr = step(cfg, s, a, items, env);
      steps.push_back({s.observation, a, tr.reward});
      ret += tr.reward;
      s = std::move(tr.next);
    }
    ctrs[e] = ctr(ret, cfg.episode_len, cfg.r_max);
  };

  if (threads == 0) threads = worker_threads();
  threads = std::min(threads, std::max<std::size_t>(episodes, 1));
  if (threads <= 1) {
    for (std::size_t e = 0; e < episodes; ++e) run_episode(e);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t e = w; e < episodes; e += threads) run_episode(e);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& err : errors) {
      if (err) std::rethrow_exception(err);
    }
  }

  RolloutResult out;
  out.trajectories.reserve(episodes);
  for (std::size_t e = 0; e < episodes; ++e) out.trajectories.emplace_back(e, std::move(runs[e]), gamma);
  out.ctr = std::move(ctrs);
  if (episodes > 0) {
    double sum = 0.0;
    for (double c : out.ctr) sum += c;
    out.mean_ctr = sum / static_cast<double>(episodes);
    double var = 0.0;
    for (double c : out.ctr) var += (c - out.mean_ctr) * (c - out.mean_ctr);
    out.std_ctr = std::sqrt(var / static_cast<double>(episodes));
  }
  return out;
}

}  // namespace maskrdt
