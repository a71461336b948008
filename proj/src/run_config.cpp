// SPDX-License-Identifier: Apache-2.0

#include "maskrdt/run_config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace maskrdt {

namespace {

std::string trim(std::string s) {
  auto ws = [](unsigned char c) { return std::isspace(c) != 0; };
  s.erase(s.begin(), std::find_if_not(s.begin(), s.end(), ws));
  s.erase(std::find_if_not(s.rbegin(), s.rend(), ws).base(), s.end());
  return s;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw std::invalid_argument("config '" + key + "': '" + value + "' is not " + expected);
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"seed", "0", "random seed for every stochastic step"},
      // simulator / data generation
      {"episodes", "500", "episodes to generate"},
      {"state_dim", "8", "observable state dimension"},
      {"catalog", "20", "number of items"},
      {"episode_len", "20", "steps per episode"},
      {"drift", "0.1", "preference drift toward shown items"},
      {"noise", "0.05", "preference random-walk scale"},
      {"obs_noise", "0.1", "observation noise scale"},
      {"sharpness", "5", "click sigmoid sharpness"},
      {"history_decay", "0.7", "decay of the clicked-item summary"},
      {"r_max", "1", "maximum single-step reward"},
      {"eps", "0.1", "oracle exploration rate"},
      {"gamma", "1", "return-to-go discount"},
      {"data", "maskrdt_data.jsonl", "trajectory dataset path"},
      {"items", "maskrdt_items.jsonl", "item embedding sidecar path"},
      // model
      {"d_h", "32", "hidden size"},
      {"heads", "2", "retention heads"},
      {"layers", "2", "retention blocks"},
      {"context", "8", "context length C in timesteps"},
      {"segment_len", "8", "chunkwise retention segment length"},
      {"ffn_mult", "4", "feed-forward width multiplier"},
      {"dropout", "0.1", "dropout after causal-layer projections"},
      {"mode", "parallel", "retention mode: recurrent, parallel or chunkwise"},
      // training
      {"lr", "0.001", "learning rate"},
      {"weight_decay", "0.0001", "decoupled weight decay"},
      {"batch_size", "32", "segments per step"},
      {"steps", "2000", "training steps"},
      {"beta", "1", "weight of the action loss"},
      {"grad_clip", "1", "global gradient norm cap"},
      {"eval_every", "50", "metrics row interval"},
      {"adaptive_mask", "true", "sample the exposed suffix length per segment", true},
      {"probe_size", "256", "fixed segments used for initial/final loss"},
      {"checkpoint", "maskrdt.ckpt", "checkpoint path"},
      {"metrics", "metrics.csv", "training metrics CSV path"},
      {"resume", "", "checkpoint to resume training from"},
      // evaluation
      {"online", "false", "evaluate by simulator rollout", true},
      {"offline", "false", "evaluate ranking metrics on a dataset", true},
      {"eval_episodes", "200", "rollout episodes for online evaluation"},
      {"eval_seed", "1000", "seed of the evaluation rollouts"},
      {"k", "10", "ranking cutoff"},
      {"target_return", "", "conditioning return (default r_max * episode_len)"},
      {"report", "eval.csv", "evaluation report path"},
      // bench
      {"lengths", "64,128,256,512,1024", "comma-separated sequence lengths"},
      {"bench_width", "64", "per-head width for the benchmark"},
      {"bench_segment", "64", "chunkwise segment length for the benchmark"},
      {"bench_repeats", "5", "repetitions per measurement (best is kept)"},
      {"backward", "false", "time forward+backward", true},
      {"precision", "f32", "forward benchmark precision: f32 or f64"},
      {"bench_out", "bench.csv", "benchmark CSV path"},
  };
  return keys;
}

RunConfig::RunConfig() {
  for (const auto& k : config_keys()) values_[k.name] = k.default_value;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = values_.find(key);
  if (it == values_.end()) throw std::invalid_argument("unknown config key '" + key + "'");
  it->second = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw std::invalid_argument("unknown config key '" + key + "'");
  return it->second;
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file '" + path.string() + "'");
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const auto key = trim(line.substr(0, eq));
    if (!values_.contains(key)) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    values_[key] = trim(line.substr(eq + 1));
  }
}

void RunConfig::print(std::ostream& out) const {
  for (const auto& [k, v] : values_) out << k << " = " << v << '\n';
}

double RunConfig::real(const std::string& key) const {
  const auto& v = get(key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) bad_value(key, v, "a number");
    return d;
  } catch (const std::logic_error&) {
    bad_value(key, v, "a number");
  }
}

std::uint64_t RunConfig::u64(const std::string& key) const {
  const auto& v = get(key);
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

std::size_t RunConfig::count(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

bool RunConfig::flag(const std::string& key) const {
  const auto& v = get(key);
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no" || v.empty()) return false;
  bad_value(key, v, "a boolean");
}

std::vector<std::size_t> RunConfig::list(const std::string& key) const {
  std::vector<std::size_t> out;
  std::stringstream ss(get(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || ptr != item.data() + item.size()) bad_value(key, get(key), "a list of integers");
    out.push_back(v);
  }
  return out;
}

SimConfig RunConfig::sim() const {
  SimConfig c;
  c.state_dim = count("state_dim");
  c.catalog = count("catalog");
  c.episode_len = count("episode_len");
  c.drift = real("drift");
  c.noise = real("noise");
  c.obs_noise = real("obs_noise");
  c.sharpness = real("sharpness");
  c.history_decay = real("history_decay");
  c.r_max = real("r_max");
  c.seed = u64("seed");
  c.validate();
  return c;
}

ModelConfig RunConfig::model() const {
  ModelConfig c;
  c.d_h = count("d_h");
  c.heads = count("heads");
  c.layers = count("layers");
  c.context = count("context");
  c.segment_len = count("segment_len");
  c.state_dim = count("state_dim");
  c.catalog = count("catalog");
  c.ffn_mult = count("ffn_mult");
  c.horizon = count("episode_len");
  c.dropout = real("dropout");
  c.mode = parse_mode(str("mode"));
  c.validate();
  return c;
}

TrainConfig RunConfig::train() const {
  TrainConfig c;
  c.lr = real("lr");
  c.weight_decay = real("weight_decay");
  c.batch_size = count("batch_size");
  c.steps = count("steps");
  c.beta = real("beta");
  c.grad_clip = real("grad_clip");
  c.eval_every = count("eval_every");
  c.seed = u64("seed");
  c.adaptive_mask = flag("adaptive_mask");
  c.probe_size = count("probe_size");
  c.validate();
  return c;
}

BenchConfig RunConfig::bench() const {
  BenchConfig c;
  c.lengths = list("lengths");
  c.width = count("bench_width");
  c.segment_len = count("bench_segment");
  c.repeats = count("bench_repeats");
  c.backward = flag("backward");
  const auto& p = str("precision");
  if (p != "f32" && p != "f64") bad_value("precision", p, "f32 or f64");
  c.single_precision = p == "f32";
  c.seed = u64("seed");
  return c;
}

}  // namespace maskrdt
