// SPDX-License-Identifier: Apache-2.0

#include "maskrdt/retention.hpp"

#include <array>
#include <cmath>

namespace maskrdt {

namespace {

using RowMat = Mat<double>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using Vec = Eigen::VectorXd;

ConstMap as_mat(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

MutMap as_mut(std::span<double> s, Eigen::Index rows, Eigen::Index cols) { return MutMap(s.data(), rows, cols); }

std::vector<double> to_vector(const RowMat& m) { return std::vector<double>(m.data(), m.data() + m.size()); }

struct Saved {
  RowMat q, k, v;
  double alpha;
  std::size_t segment_len;
  std::vector<RowMat> states;  // per-step (recurrent) or per-segment entry (chunkwise)
};

void backward_parallel(const Saved& s, const ConstMap& g, std::span<const std::span<double>> gi) {
  const auto n = s.q.rows();
  const RowMat d = decay_mask<double>(s.alpha, static_cast<std::size_t>(n));
  const RowMat a = (s.q * s.k.transpose()).cwiseProduct(d);
  const RowMat da = (g * s.v.transpose()).cwiseProduct(d);
  if (!gi[0].empty()) as_mut(gi[0], n, s.q.cols()).noalias() += da * s.k;
  if (!gi[1].empty()) as_mut(gi[1], n, s.k.cols()).noalias() += da.transpose() * s.q;
  if (!gi[2].empty()) as_mut(gi[2], n, s.v.cols()).noalias() += a.transpose() * g;
}

void backward_recurrent(const Saved& s, const ConstMap& g, std::span<const std::span<double>> gi) {
  const auto n = s.q.rows();
  RowMat carry = RowMat::Zero(s.k.cols(), s.v.cols());  // dL/dZ_t
  for (Eigen::Index t = n; t-- > 0;) {
    if (!gi[0].empty()) as_mut(gi[0], n, s.q.cols()).row(t).noalias() += g.row(t) * s.states[static_cast<std::size_t>(t)].transpose();
    carry *= s.alpha;
    carry.noalias() += s.q.row(t).transpose() * g.row(t);
    if (!gi[1].empty()) as_mut(gi[1], n, s.k.cols()).row(t).noalias() += s.v.row(t) * carry.transpose();
    if (!gi[2].empty()) as_mut(gi[2], n, s.v.cols()).row(t).noalias() += s.k.row(t) * carry;
  }
}

void backward_chunkwise(const Saved& s, const ConstMap& g, std::span<const std::span<double>> gi) {
  const auto total = s.q.rows();
  const auto seg = static_cast<Eigen::Index>(s.segment_len);
  const RowMat full_mask = decay_mask<double>(s.alpha, static_cast<std::size_t>(std::min(seg, total)));
  RowMat carry = RowMat::Zero(s.k.cols(), s.v.cols());  // dL/dZ leaving the current segment
  const auto segments = static_cast<Eigen::Index>(s.states.size());
  for (Eigen::Index si = segments; si-- > 0;) {
    const Eigen::Index start = si * seg;
    const Eigen::Index len = std::min(seg, total - start);
    const RowMat& z_prev = s.states[static_cast<std::size_t>(si)];
    auto qs = s.q.middleRows(start, len);
    auto ks = s.k.middleRows(start, len);
    auto vs = s.v.middleRows(start, len);
    auto gs = g.middleRows(start, len);
    const auto d = full_mask.topLeftCorner(len, len);
    Vec inner(len), tail(len);
    for (Eigen::Index i = 0; i < len; ++i) {
      inner(i) = std::pow(s.alpha, static_cast<double>(i + 1));
      tail(i) = std::pow(s.alpha, static_cast<double>(len - i - 1));
    }
    const RowMat a = (qs * ks.transpose()).cwiseProduct(d);
    const RowMat da = (gs * vs.transpose()).cwiseProduct(d);
    if (!gi[0].empty()) {
      auto dq = as_mut(gi[0], total, s.q.cols()).middleRows(start, len);
      dq.noalias() += da * ks;
      dq.noalias() += inner.asDiagonal() * (gs * z_prev.transpose());
    }
    if (!gi[1].empty()) {
      auto dk = as_mut(gi[1], total, s.k.cols()).middleRows(start, len);
      dk.noalias() += da.transpose() * qs;
      dk.noalias() += tail.asDiagonal() * (vs * carry.transpose());
    }
    if (!gi[2].empty()) {
      auto dv = as_mut(gi[2], total, s.v.cols()).middleRows(start, len);
      dv.noalias() += a.transpose() * gs;
      dv.noalias() += tail.asDiagonal() * (ks * carry);
    }
    const RowMat q_decayed = inner.asDiagonal() * qs;
    carry *= std::pow(s.alpha, static_cast<double>(len));
    carry.noalias() += q_decayed.transpose() * gs;
  }
}

}  // namespace

const char* mode_name(RetentionMode mode) {
  switch (mode) {
    case RetentionMode::recurrent: return "recurrent";
    case RetentionMode::parallel: return "parallel";
    case RetentionMode::chunkwise: return "chunkwise";
  }
  return "?";
}

RetentionMode parse_mode(const std::string& name) {
  if (name == "recurrent") return RetentionMode::recurrent;
  if (name == "parallel") return RetentionMode::parallel;
  if (name == "chunkwise") return RetentionMode::chunkwise;
  throw std::invalid_argument("unknown retention mode '" + name + "'");
}

std::vector<double> alpha_schedule(std::size_t heads) {
  if (heads == 0) throw std::invalid_argument("alpha_schedule: head count must be >= 1");
  std::vector<double> alphas(heads);
  for (std::size_t j = 0; j < heads; ++j) {
    // linspace(0, h-1, h) has unit spacing, so its j-th entry is exactly j.
    alphas[j] = 1.0 - std::exp2(-5.0 - static_cast<double>(j));
  }
  return alphas;
}

std::vector<double> rotation_angles(std::size_t head_dim, double base) {
  if (head_dim == 0 || head_dim % 2 != 0) throw std::invalid_argument("rotation_angles: head dim must be even");
  std::vector<double> theta(head_dim / 2);
  for (std::size_t j = 0; j < theta.size(); ++j) {
    theta[j] = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(head_dim));
  }
  return theta;
}

RetentionConfig::RetentionConfig(std::size_t d_h_, std::size_t heads_) : d_h(d_h_), heads(heads_) {
  if (heads == 0 || d_h % heads != 0) throw std::invalid_argument("RetentionConfig: d_h must be divisible by h");
  if (head_dim() % 2 != 0) throw std::invalid_argument("RetentionConfig: per-head dim must be even");
  alphas = alpha_schedule(heads);
  theta = rotation_angles(head_dim());
}

Tensor retention(const Tensor& q, const Tensor& k, const Tensor& v, double alpha, RetentionMode mode,
                 std::size_t segment_len) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.shape() != k.shape() || v.rows() != q.rows()) {
    throw DimensionError("retention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                         shape_str(v.shape()));
  }
  auto saved = std::make_shared<Saved>();
  saved->q = as_mat(q);
  saved->k = as_mat(k);
  saved->v = as_mat(v);
  saved->alpha = alpha;
  saved->segment_len = segment_len;

  RowMat out;
  switch (mode) {
    case RetentionMode::parallel:
      out = retention_parallel<double>(saved->q, saved->k, saved->v, alpha);
      break;
    case RetentionMode::recurrent: {
      RetentionState<double> state(k.cols(), v.cols());
      out.resize(saved->q.rows(), saved->v.cols());
      const bool track = q.on_graph() || k.on_graph() || v.on_graph();
      for (Eigen::Index n = 0; n < saved->q.rows(); ++n) {
        recurrent_step(saved->q.row(n), saved->k.row(n), saved->v.row(n), alpha, state, out.row(n));
        if (track) saved->states.push_back(state.z);
      }
      if (!out.allFinite()) throw NumericError("retention: non-finite intermediate");
      break;
    }
    case RetentionMode::chunkwise:
      out = retention_chunkwise<double>(saved->q, saved->k, saved->v, alpha, segment_len, &saved->states);
      break;
  }

  Tensor value({out.rows() > 0 ? static_cast<std::size_t>(out.rows()) : 0, static_cast<std::size_t>(v.cols())},
               to_vector(out));
  const std::array<Tensor, 3> inputs{q, k, v};
  Graph* g = nullptr;
  for (const auto& t : inputs) {
    if (t.on_graph()) g = t.graph();
  }
  if (g == nullptr) return value;
  for (const auto& t : inputs) {
    if (t.on_graph() && t.graph() != g) throw std::logic_error("inputs belong to different graphs");
  }
  return g->record(OpKind::retention, std::move(value), inputs,
                   [saved, mode](std::span<const double> grad, std::span<const std::span<double>> gi) {
                     const ConstMap gm(grad.data(), saved->q.rows(), saved->v.cols());
                     switch (mode) {
                       case RetentionMode::parallel: backward_parallel(*saved, gm, gi); break;
                       case RetentionMode::recurrent: backward_recurrent(*saved, gm, gi); break;
                       case RetentionMode::chunkwise: backward_chunkwise(*saved, gm, gi); break;
                     }
                   });
}

QKV project_qkv(const Tensor& h, const Tensor& w_q, const Tensor& w_k, const Tensor& w_v,
                const RetentionConfig& cfg, std::size_t first_position) {
  const auto d = cfg.head_dim();
  return {rotate_pairs(matmul(h, w_q), cfg.theta, d, first_position),
          rotate_pairs(matmul(h, w_k), cfg.theta, d, first_position), matmul(h, w_v)};
}

Tensor msr(const Tensor& h, const MsrParams& p, const RetentionConfig& cfg, RetentionMode mode,
           std::size_t segment_len) {
  const auto qkv = project_qkv(h, p.w_q, p.w_k, p.w_v, cfg);
  const auto d = cfg.head_dim();
  std::vector<Tensor> heads;
  heads.reserve(cfg.heads);
  for (std::size_t j = 0; j < cfg.heads; ++j) {
    const auto b = j * d, e = (j + 1) * d;
    heads.push_back(retention(slice_cols(qkv.q, b, e), slice_cols(qkv.k, b, e), slice_cols(qkv.v, b, e),
                              cfg.alphas[j], mode, segment_len));
  }
  const Tensor multi = cfg.heads == 1 ? heads.front() : concat_cols(heads);
  const Tensor normed = group_norm(multi, p.gn_gamma, p.gn_beta, cfg.heads, kGroupNormEps);
  const Tensor gate_in = matmul(h, p.w_p);
  const Tensor swish = mul(gate_in, sigmoid(gate_in));
  return matmul(mul(swish, normed), p.w_o);
}

}  // namespace maskrdt
