// SPDX-License-Identifier: Apache-2.0
//
// Multi-scale retention. Three computations of the same causal operator
//
//   out_n = sum_{m<=n} alpha^(n-m) (Q_n . K_m) V_m
//
// are provided: a token-by-token recurrence over a d×d state, the parallel
// form (Q K^T ⊙ D) V, and the chunkwise form that runs the parallel form inside
// segments and carries the recurrent state across segment boundaries.
//
// The raw kernels below operate on Eigen matrices and are templated on the
// scalar so the benchmark can run them in f32. The model goes through the
// differentiable `retention` op, which is f64.

#pragma once

#include "maskrdt/numerics.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace maskrdt {

enum class RetentionMode { recurrent, parallel, chunkwise };

const char* mode_name(RetentionMode mode);
RetentionMode parse_mode(const std::string& name);

// 1 - 2^(-5 - linspace(0, h-1, h)).
std::vector<double> alpha_schedule(std::size_t heads);

// theta_j = base^(-2j/d) for each channel pair j of a d-wide head.
std::vector<double> rotation_angles(std::size_t head_dim, double base = 10000.0);

struct RetentionConfig {
  std::size_t d_h = 0;
  std::size_t heads = 1;
  std::vector<double> alphas;
  std::vector<double> theta;

  RetentionConfig() = default;
  RetentionConfig(std::size_t d_h, std::size_t heads);
  std::size_t head_dim() const { return d_h / heads; }
};

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// D[n][m] = alpha^(n-m) for n >= m, 0 otherwise.
template <typename T = double>
Mat<T> decay_mask(double alpha, std::size_t size) {
  Mat<T> d = Mat<T>::Zero(static_cast<Eigen::Index>(size), static_cast<Eigen::Index>(size));
  for (std::size_t n = 0; n < size; ++n) {
    T p = T(1);
    for (std::size_t m = n + 1; m-- > 0;) {
      d(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m)) = p;
      p *= static_cast<T>(alpha);
    }
  }
  return d;
}

template <typename T>
struct RetentionState {
  Mat<T> z;
  std::size_t step = 0;

  RetentionState() = default;
  RetentionState(std::size_t dk, std::size_t dv)
      : z(Mat<T>::Zero(static_cast<Eigen::Index>(dk), static_cast<Eigen::Index>(dv))) {}
};

namespace detail {
template <typename T>
void check_qkv(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v) {
  if (q.rows() != k.rows() || q.rows() != v.rows() || q.cols() != k.cols()) {
    throw DimensionError("retention: q/k/v shapes disagree");
  }
}
template <typename T>
void check_finite_mat(const Mat<T>& m) {
  if (!m.allFinite()) throw NumericError("retention: non-finite intermediate");
}
}  // namespace detail

// One token: Z <- alpha Z + k^T v, out = q Z. Cost is independent of how many
// tokens the state has absorbed.
template <typename T, typename RowQ, typename RowK, typename RowV, typename RowOut>
void recurrent_step(const RowQ& q, const RowK& k, const RowV& v, double alpha, RetentionState<T>& state,
                    RowOut&& out) {
  state.z *= static_cast<T>(alpha);
  state.z.noalias() += k.transpose() * v;
  out.noalias() = q * state.z;
  ++state.step;
}

template <typename T>
Mat<T> retention_recurrent(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, double alpha,
                           RetentionState<T>& state) {
  detail::check_qkv(q, k, v);
  if (state.z.size() == 0) state = RetentionState<T>(static_cast<std::size_t>(k.cols()), static_cast<std::size_t>(v.cols()));
  if (state.z.rows() != k.cols() || state.z.cols() != v.cols()) {
    throw DimensionError("retention_recurrent: state shape does not match k/v");
  }
  Mat<T> out(q.rows(), v.cols());
  for (Eigen::Index n = 0; n < q.rows(); ++n) {
    recurrent_step(q.row(n), k.row(n), v.row(n), alpha, state, out.row(n));
  }
  detail::check_finite_mat(out);
  detail::check_finite_mat(state.z);
  return out;
}

template <typename T>
Mat<T> retention_parallel(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, double alpha) {
  detail::check_qkv(q, k, v);
  const Mat<T> d = decay_mask<T>(alpha, static_cast<std::size_t>(q.rows()));
  const Mat<T> scores = (q * k.transpose()).cwiseProduct(d);
  Mat<T> out = scores * v;
  detail::check_finite_mat(out);
  return out;
}

// Segments of length `segment_len`; the last one may be shorter. When `states`
// is non-null it receives the carried state entering each segment.
template <typename T>
Mat<T> retention_chunkwise(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, double alpha,
                           std::size_t segment_len, std::vector<Mat<T>>* states = nullptr) {
  detail::check_qkv(q, k, v);
  if (segment_len == 0) throw std::invalid_argument("retention_chunkwise: segment length must be >= 1");
  const auto total = static_cast<std::size_t>(q.rows());
  const auto dk = k.cols(), dv = v.cols();
  Mat<T> out(q.rows(), dv);
  Mat<T> z = Mat<T>::Zero(dk, dv);
  const Mat<T> full_mask = decay_mask<T>(alpha, std::min(segment_len, total));
  if (states) states->clear();
  for (std::size_t start = 0; start < total; start += segment_len) {
    const auto len = std::min(segment_len, total - start);
    const auto s = static_cast<Eigen::Index>(start), l = static_cast<Eigen::Index>(len);
    if (states) states->push_back(z);
    auto qs = q.middleRows(s, l);
    auto ks = k.middleRows(s, l);
    auto vs = v.middleRows(s, l);
    const auto d = full_mask.topLeftCorner(l, l);
    // inner[i] = alpha^(i+1), decay applied to the carried state for row i.
    Eigen::Matrix<T, Eigen::Dynamic, 1> inner(l), tail(l);
    for (Eigen::Index i = 0; i < l; ++i) {
      inner(i) = static_cast<T>(std::pow(alpha, static_cast<double>(i + 1)));
      tail(i) = static_cast<T>(std::pow(alpha, static_cast<double>(l - i - 1)));
    }
    auto o = out.middleRows(s, l);
    o.noalias() = (qs * ks.transpose()).cwiseProduct(d) * vs;
    o.noalias() += inner.asDiagonal() * (qs * z);
    z *= static_cast<T>(std::pow(alpha, static_cast<double>(len)));
    z.noalias() += ks.transpose() * (tail.asDiagonal() * vs);
  }
  detail::check_finite_mat(out);
  return out;
}

// Differentiable retention over a zero initial state. Each mode has its own
// backward pass matching its forward structure.
Tensor retention(const Tensor& q, const Tensor& k, const Tensor& v, double alpha, RetentionMode mode,
                 std::size_t segment_len = 0);

struct QKV {
  Tensor q, k, v;
};

// Projects H and applies the relative-position rotation to Q and K. Row r is
// taken to sit at absolute position first_position + r. Under the paired-real
// representation the conjugated key becomes a rotation of K by the same angle
// consumed through a plain transpose, so Q_n . K_m depends only on n - m.
QKV project_qkv(const Tensor& h, const Tensor& w_q, const Tensor& w_k, const Tensor& w_v,
                const RetentionConfig& cfg, std::size_t first_position = 0);

struct MsrParams {
  Tensor w_q, w_k, w_v;  // d_h×d_h, head j owns columns [j d, (j+1) d)
  Tensor w_p, w_o;       // d_h×d_h
  Tensor gn_gamma, gn_beta;  // 1×d_h
};

inline constexpr double kGroupNormEps = 1e-6;

// [(H W_P ⊙ sigmoid(H W_P)) ⊙ GN(Concat(head_1..head_h))] W_O
Tensor msr(const Tensor& h, const MsrParams& params, const RetentionConfig& cfg, RetentionMode mode,
           std::size_t segment_len);

}  // namespace maskrdt
