// SPDX-License-Identifier: Apache-2.0

#include "maskrdt/model.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>

namespace maskrdt {

namespace {

constexpr double kLayerNormEps = 1e-5;

std::string block_key(std::size_t layer, const char* leaf) { return "block" + std::to_string(layer) + "." + leaf; }

Tensor random_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::vector<double> v(rows * cols);
  for (double& x : v) x = normal(rng, stddev);
  return Tensor::matrix(rows, cols, std::move(v));
}

Tensor zeros_row(std::size_t n) { return Tensor::zeros({1, n}); }
Tensor ones_row(std::size_t n) { return Tensor::filled({1, n}, 1.0); }

Tensor layer_norm(const Tensor& x, const ParamSet& p, const std::string& prefix) {
  return group_norm(x, p.get(prefix + ".gamma"), p.get(prefix + ".beta"), 1, kLayerNormEps);
}

Tensor linear(const Tensor& x, const ParamSet& p, const std::string& prefix) {
  return add_row(matmul(x, p.get(prefix + ".w")), p.get(prefix + ".b"));
}

Tensor dropout(const Tensor& x, double prob, const ForwardOptions& opts) {
  if (!opts.training || prob <= 0.0) return x;
  if (opts.rng == nullptr) throw std::invalid_argument("dropout in training mode needs an rng");
  const double keep = 1.0 / (1.0 - prob);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = uniform01(*opts.rng) < prob ? 0.0 : keep;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

// 1×3C averaging row over the given slots.
Tensor pooling_row(std::span<const std::size_t> slots, std::size_t tokens) {
  std::vector<double> w(tokens, 0.0);
  for (auto s : slots) w[s] = 1.0 / static_cast<double>(slots.size());
  return Tensor::matrix(1, tokens, std::move(w));
}

void put_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, 8);
}

std::uint64_t get_u64(const char* bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  return v;
}

}  // namespace

// ---- config ---------------------------------------------------------------

void ModelConfig::validate() const {
  if (layers < 1) throw std::invalid_argument("ModelConfig: layers must be >= 1");
  if (context < 1) throw std::invalid_argument("ModelConfig: context must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("ModelConfig: dropout must lie in [0, 1)");
  if (state_dim < 1 || catalog < 1 || ffn_mult < 1 || horizon < 1) {
    throw std::invalid_argument("ModelConfig: state_dim, catalog, ffn_mult and horizon must be >= 1");
  }
  if (mode == RetentionMode::chunkwise && segment_len == 0) {
    throw std::invalid_argument("ModelConfig: chunkwise mode needs segment_len >= 1");
  }
  (void)retention();  // d_h / heads divisibility
}

nlohmann::ordered_json ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["d_h"] = d_h;
  j["heads"] = heads;
  j["layers"] = layers;
  j["context"] = context;
  j["segment_len"] = segment_len;
  j["state_dim"] = state_dim;
  j["catalog"] = catalog;
  j["ffn_mult"] = ffn_mult;
  j["horizon"] = horizon;
  j["dropout"] = dropout;
  j["mode"] = mode_name(mode);
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_h = j.at("d_h").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.context = j.at("context").get<std::size_t>();
  c.segment_len = j.at("segment_len").get<std::size_t>();
  c.state_dim = j.at("state_dim").get<std::size_t>();
  c.catalog = j.at("catalog").get<std::size_t>();
  c.ffn_mult = j.at("ffn_mult").get<std::size_t>();
  c.horizon = j.at("horizon").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.mode = parse_mode(j.at("mode").get<std::string>());
  c.validate();
  return c;
}

// ---- params ---------------------------------------------------------------

void ParamSet::add(std::string name, Tensor value) {
  if (index_.contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(value));
}

void ParamSet::set(std::string_view name, Tensor value) {
  const auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("no parameter '" + std::string(name) + "'");
  auto& slot = entries_[it->second].second;
  if (slot.shape() != value.shape()) {
    throw DimensionError("parameter '" + std::string(name) + "' expects " + shape_str(slot.shape()) + ", got " +
                         shape_str(value.shape()));
  }
  slot = std::move(value);
}

const Tensor& ParamSet::get(std::string_view name) const {
  const auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("no parameter '" + std::string(name) + "'");
  return entries_[it->second].second;
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.numel();
  return n;
}

ParamSet ParamSet::on_graph(Graph& g) const {
  ParamSet out;
  out.entries_.reserve(entries_.size());
  out.index_ = index_;
  for (const auto& [name, t] : entries_) out.entries_.emplace_back(name, g.leaf(t));
  return out;
}

ParamSet init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto d = cfg.d_h;
  const auto f = cfg.ffn_mult * d;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  ParamSet p;
  auto add_ln = [&](const std::string& prefix) {
    p.add(prefix + ".gamma", ones_row(d));
    p.add(prefix + ".beta", zeros_row(d));
  };

  p.add("embed.state.w", random_matrix(cfg.state_dim, d, 1.0 / std::sqrt(static_cast<double>(cfg.state_dim)), rng));
  p.add("embed.state.b", zeros_row(d));
  add_ln("embed.state.ln");
  p.add("embed.action.table", random_matrix(cfg.catalog, d, 1.0, rng));
  add_ln("embed.action.ln");
  p.add("embed.rtg.w", random_matrix(2, d, 1.0 / std::sqrt(2.0), rng));
  p.add("embed.rtg.b", zeros_row(d));
  add_ln("embed.rtg.ln");
  p.add("embed.mask", random_matrix(1, d, 0.02, rng));
  p.add("embed.pos", random_matrix(cfg.tokens(), d, 0.02, rng));

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    add_ln(block_key(l, "ln1"));
    for (const char* w : {"msr.w_q", "msr.w_k", "msr.w_v", "msr.w_p", "msr.w_o"}) {
      p.add(block_key(l, w), random_matrix(d, d, sd, rng));
    }
    p.add(block_key(l, "msr.gn.gamma"), ones_row(d));
    p.add(block_key(l, "msr.gn.beta"), zeros_row(d));
    add_ln(block_key(l, "ln2"));
    p.add(block_key(l, "ffn.l1.w"), random_matrix(d, f, sd, rng));
    p.add(block_key(l, "ffn.l1.b"), zeros_row(f));
    p.add(block_key(l, "ffn.l2.w"), random_matrix(f, d, 1.0 / std::sqrt(static_cast<double>(f)), rng));
    p.add(block_key(l, "ffn.l2.b"), zeros_row(d));
  }

  p.add("causal.action.w", random_matrix(d, d, sd, rng));
  p.add("causal.action.b", zeros_row(d));
  p.add("causal.state.w", random_matrix(d, d, sd, rng));
  p.add("causal.state.b", zeros_row(d));

  p.add("reward_net.l1.w", random_matrix(2 * d, d, 1.0 / std::sqrt(2.0 * static_cast<double>(d)), rng));
  p.add("reward_net.l1.b", zeros_row(d));
  p.add("reward_net.l2.w", random_matrix(d, 1, sd, rng));
  p.add("reward_net.l2.b", zeros_row(1));

  p.add("action_net.l1.w", random_matrix(d + 1, d, 1.0 / std::sqrt(static_cast<double>(d + 1)), rng));
  p.add("action_net.l1.b", zeros_row(d));
  p.add("action_net.l2.w", random_matrix(d, cfg.catalog, sd, rng));
  p.add("action_net.l2.b", zeros_row(cfg.catalog));
  return p;
}

// ---- forward --------------------------------------------------------------

Tensor embed(const MaskedSegment& seg, const ParamSet& p, const ModelConfig& cfg) {
  if (seg.context != cfg.context) throw DimensionError("embed: segment context differs from the model's");
  const auto tokens = seg.tokens();
  // Sources, in order: visible states, visible actions, the RTG token, the mask.
  std::vector<std::size_t> state_slots, action_offsets;
  std::vector<double> states;
  std::vector<std::size_t> action_ids;
  std::size_t rtg_offset = seg.first_visible_offset();
  for (std::size_t j = 0; j < seg.context; ++j) {
    if (seg.is_visible(j, Token::state)) {
      if (seg.states[j].size() != cfg.state_dim) throw DimensionError("embed: state dimension mismatch");
      states.insert(states.end(), seg.states[j].begin(), seg.states[j].end());
      state_slots.push_back(j);
    }
    if (seg.is_visible(j, Token::action)) {
      if (seg.actions[j] >= cfg.catalog) throw std::out_of_range("embed: action outside catalog");
      action_ids.push_back(seg.actions[j]);
      action_offsets.push_back(j);
    }
  }

  std::vector<Tensor> sources;
  sources.push_back(layer_norm(
      linear(Tensor::matrix(state_slots.size(), cfg.state_dim, std::move(states)), p, "embed.state"), p,
      "embed.state.ln"));
  if (!action_ids.empty()) {
    sources.push_back(layer_norm(gather_rows(p.get("embed.action.table"), action_ids), p, "embed.action.ln"));
  }
  const double horizon = static_cast<double>(seg.horizon > 0 ? seg.horizon : cfg.horizon);
  const Tensor rtg_in =
      Tensor::matrix(1, 2, {seg.rtg[rtg_offset] / horizon, static_cast<double>(seg.t) / horizon});
  sources.push_back(layer_norm(linear(rtg_in, p, "embed.rtg"), p, "embed.rtg.ln"));
  sources.push_back(p.get("embed.mask"));

  const std::size_t action_base = state_slots.size();
  const std::size_t rtg_row = action_base + action_ids.size();
  const std::size_t mask_row = rtg_row + 1;
  std::vector<std::size_t> index(tokens, mask_row);
  for (std::size_t i = 0; i < state_slots.size(); ++i) index[MaskedSegment::slot(state_slots[i], Token::state)] = i;
  for (std::size_t i = 0; i < action_offsets.size(); ++i) {
    index[MaskedSegment::slot(action_offsets[i], Token::action)] = action_base + i;
  }
  index[MaskedSegment::slot(rtg_offset, Token::rtg)] = rtg_row;

  return add(gather_rows(concat_rows(sources), index), p.get("embed.pos"));
}

Tensor block(const Tensor& h, const ParamSet& p, const ModelConfig& cfg, std::size_t layer) {
  const MsrParams mp{p.get(block_key(layer, "msr.w_q")), p.get(block_key(layer, "msr.w_k")),
                     p.get(block_key(layer, "msr.w_v")), p.get(block_key(layer, "msr.w_p")),
                     p.get(block_key(layer, "msr.w_o")), p.get(block_key(layer, "msr.gn.gamma")),
                     p.get(block_key(layer, "msr.gn.beta"))};
  const Tensor x =
      add(h, msr(layer_norm(h, p, block_key(layer, "ln1")), mp, cfg.retention(), cfg.mode, cfg.segment_len));
  const Tensor hidden = gelu(linear(layer_norm(x, p, block_key(layer, "ln2")), p, block_key(layer, "ffn.l1")));
  return add(x, linear(hidden, p, block_key(layer, "ffn.l2")));
}

CausalOutput causal_layer(const Tensor& h, const MaskedSegment& seg, const ParamSet& p, const ModelConfig& cfg,
                          const ForwardOptions& opts) {
  std::vector<std::size_t> s_slots, a_slots;
  for (std::size_t j = 0; j < seg.context; ++j) {
    if (seg.is_visible(j, Token::state)) s_slots.push_back(MaskedSegment::slot(j, Token::state));
    if (seg.is_visible(j, Token::action)) a_slots.push_back(MaskedSegment::slot(j, Token::action));
  }
  if (s_slots.empty()) throw std::invalid_argument("causal_layer: no visible state");
  const std::size_t g_slot = MaskedSegment::slot(seg.first_visible_offset(), Token::rtg);
  const auto tokens = seg.tokens();

  const Tensor s_pool = matmul(pooling_row(s_slots, tokens), h);
  Tensor pre_a = add(s_pool, gather_rows(h, std::span<const std::size_t>(&g_slot, 1)));
  if (!a_slots.empty()) pre_a = add(pre_a, matmul(pooling_row(a_slots, tokens), h));
  const Tensor psi_a = dropout(gelu(linear(pre_a, p, "causal.action")), cfg.dropout, opts);
  const Tensor psi_s = dropout(gelu(linear(add(s_pool, psi_a), p, "causal.state")), cfg.dropout, opts);
  return {psi_a, psi_s};
}

Tensor predict_reward(const Tensor& psi_s, const Tensor& psi_a, const ParamSet& p) {
  const std::array<Tensor, 2> in{psi_s, psi_a};
  return linear(gelu(linear(concat_cols(in), p, "reward_net.l1")), p, "reward_net.l2");
}

Tensor predict_action(const Tensor& psi_a, const Tensor& reward, const ParamSet& p) {
  const std::array<Tensor, 2> in{psi_a, reward};
  return linear(gelu(linear(concat_cols(in), p, "action_net.l1")), p, "action_net.l2");
}

ModelOutput forward(const MaskedSegment& seg, const ParamSet& p, const ModelConfig& cfg, const ForwardOptions& opts) {
  Tensor h = embed(seg, p, cfg);
  for (std::size_t l = 0; l < cfg.layers; ++l) h = block(h, p, cfg, l);
  auto [psi_a, psi_s] = causal_layer(h, seg, p, cfg, opts);
  Tensor reward = predict_reward(psi_s, psi_a, p);
  Tensor logits = predict_action(psi_a, reward, p);
  return {std::move(reward), std::move(logits), std::move(psi_a), std::move(psi_s)};
}

BatchOutput forward_batch(std::span<const MaskedSegment> segs, const ParamSet& p, const ModelConfig& cfg,
                          const ForwardOptions& opts) {
  if (segs.empty()) throw std::invalid_argument("forward_batch: empty batch");
  std::vector<Tensor> rewards, logits;
  rewards.reserve(segs.size());
  logits.reserve(segs.size());
  for (const auto& s : segs) {
    auto out = forward(s, p, cfg, opts);
    rewards.push_back(std::move(out.reward));
    logits.push_back(std::move(out.logits));
  }
  return {concat_rows(rewards), concat_rows(logits)};
}

MaskedSegment inference_segment(std::span<const Step> history, std::span<const double> state, double target_return,
                                const ModelConfig& cfg) {
  std::vector<Step> steps(history.begin(), history.end());
  steps.push_back({std::vector<double>(state.begin(), state.end()), 0, 0.0});
  const std::size_t t = steps.size() - 1;
  const std::size_t m = std::min(cfg.context, t + 1);
  const Trajectory traj(0, std::move(steps), 1.0);
  MaskedSegment seg = build_segment(traj, t, cfg.context, m, cfg.horizon);
  double earned = 0.0;
  for (std::size_t k = 0; k + m <= t; ++k) earned += history[k].reward;
  seg.rtg[seg.first_visible_offset()] = target_return - earned;
  return seg;
}

std::size_t act(std::span<const Step> history, std::span<const double> state, double target_return,
                const ParamSet& p, const ModelConfig& cfg, Rng* rng) {
  const auto seg = inference_segment(history, state, target_return, cfg);
  const Tensor out = forward(seg, p, cfg).logits;
  const auto logits = out.data();
  if (rng == nullptr) {
    return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> w(logits.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(logits[i] - mx);
  return std::discrete_distribution<std::size_t>(w.begin(), w.end())(*rng);
}

// ---- checkpoint -----------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  nlohmann::ordered_json header;
  header["format"] = "maskrdt-ckpt";
  header["version"] = 1;
  header["config"] = ckpt.config.to_json();
  header["state"] = ckpt.state.is_null() ? nlohmann::ordered_json::object() : ckpt.state;
  header["tensors"] = ckpt.params.size() + ckpt.extra.size();
  out << header.dump() << '\n';
  auto write_set = [&out](const ParamSet& set, const char* group) {
    for (const auto& [name, t] : set.entries()) {
      nlohmann::ordered_json meta;
      meta["name"] = name;
      meta["group"] = group;
      meta["shape"] = t.shape();
      meta["dtype"] = "f64le";
      out << meta.dump() << '\n';
      for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
  };
  write_set(ckpt.params, "params");
  write_set(ckpt.extra, "extra");
  if (!out) throw std::runtime_error("write to '" + path.string() + "' failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  const auto header = nlohmann::ordered_json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("format", "") != "maskrdt-ckpt") {
    throw std::runtime_error("'" + path.string() + "' is not a maskrdt checkpoint");
  }
  if (header.at("version").get<int>() != 1) throw std::runtime_error("unsupported checkpoint version");
  Checkpoint ckpt;
  ckpt.config = ModelConfig::from_json(header.at("config"));
  ckpt.state = header.at("state");
  const auto count = header.at("tensors").get<std::size_t>();
  std::vector<char> buf;
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw std::runtime_error("checkpoint truncated at tensor " + std::to_string(i));
    const auto meta = nlohmann::json::parse(line);
    if (meta.at("dtype").get<std::string>() != "f64le") throw std::runtime_error("unsupported tensor dtype");
    Shape shape = meta.at("shape").get<Shape>();
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    buf.resize(8 * n);
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!in) throw std::runtime_error("checkpoint payload truncated");
    std::vector<double> data(n);
    for (std::size_t k = 0; k < n; ++k) data[k] = std::bit_cast<double>(get_u64(buf.data() + 8 * k));
    Tensor t(std::move(shape), std::move(data));
    auto& target = meta.at("group").get<std::string>() == "extra" ? ckpt.extra : ckpt.params;
    target.add(meta.at("name").get<std::string>(), std::move(t));
  }
  // Shapes must agree with what the config would build.
  Rng probe = make_rng(0);
  const auto expected = init_params(ckpt.config, probe);
  if (expected.size() != ckpt.params.size()) throw std::runtime_error("checkpoint parameter set does not match its config");
  for (const auto& [name, t] : expected.entries()) {
    if (!ckpt.params.contains(name) || ckpt.params.get(name).shape() != t.shape()) {
      throw std::runtime_error("checkpoint tensor '" + name + "' does not match its config");
    }
  }
  return ckpt;
}

}  // namespace maskrdt
