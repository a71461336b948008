// SPDX-License-Identifier: Apache-2.0

#include "maskrdt/bench.hpp"

#include "maskrdt/random.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <limits>
#include <ostream>

namespace maskrdt {

namespace {

using Clock = std::chrono::steady_clock;

template <typename F>
double best_ms(std::size_t repeats, F&& f) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < std::max<std::size_t>(repeats, 1); ++r) {
    const auto t0 = Clock::now();
    f();
    const auto t1 = Clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

template <typename T>
Mat<T> random_mat(std::size_t rows, std::size_t cols, Rng& rng) {
  Mat<T> m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  const double s = 1.0 / std::sqrt(static_cast<double>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(normal(rng, s));
  return m;
}

// Hand-written backward of the causal softmax reference (f64).
void softmax_attention_backward(const Mat<double>& q, const Mat<double>& k, const Mat<double>& v,
                                const Mat<double>& g, Mat<double>& dq, Mat<double>& dk, Mat<double>& dv) {
  const auto n = q.rows();
  const double s = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Mat<double> p = (q * k.transpose()) * s;
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = r + 1; c < n; ++c) p(r, c) = -std::numeric_limits<double>::infinity();
    const double mx = p.row(r).head(r + 1).maxCoeff();
    p.row(r) = (p.row(r).array() - mx).exp();
    p.row(r) /= p.row(r).sum();
  }
  dv.noalias() = p.transpose() * g;
  const Mat<double> dp = g * v.transpose();
  Mat<double> ds = p.cwiseProduct(dp);
  const Eigen::VectorXd row_sum = ds.rowwise().sum();
  ds -= p.cwiseProduct(row_sum.replicate(1, n));
  dq.noalias() = ds * k * s;
  dk.noalias() = ds.transpose() * q * s;
}

template <typename T>
std::vector<BenchRow> forward_rows(const BenchConfig& cfg, std::size_t len, Rng& rng) {
  const auto d = cfg.width;
  const Mat<T> q = random_mat<T>(len, d, rng), k = random_mat<T>(len, d, rng), v = random_mat<T>(len, d, rng);
  const double alpha = alpha_schedule(1)[0];
  const std::size_t elt = sizeof(T);
  const std::size_t io = 4 * len * d * elt;  // q, k, v, out
  const std::size_t m = std::min(cfg.segment_len, len);
  std::vector<BenchRow> rows;
  Mat<T> sink;
  rows.push_back({len, "parallel",
                  best_ms(cfg.repeats, [&] { sink = retention_parallel<T>(q, k, v, alpha); }),
                  io + 3 * len * len * elt});
  rows.push_back({len, "chunkwise",
                  best_ms(cfg.repeats, [&] { sink = retention_chunkwise<T>(q, k, v, alpha, cfg.segment_len); }),
                  io + (3 * m * m + d * d) * elt});
  rows.push_back({len, "recurrent",
                  best_ms(cfg.repeats,
                          [&] {
                            RetentionState<T> st(d, d);
                            sink = retention_recurrent<T>(q, k, v, alpha, st);
                          }),
                  io + d * d * elt});
  rows.push_back({len, "softmax", best_ms(cfg.repeats, [&] { sink = softmax_attention<T>(q, k, v); }),
                  io + len * len * elt});
  return rows;
}

std::vector<BenchRow> backward_rows(const BenchConfig& cfg, std::size_t len, Rng& rng) {
  const auto d = cfg.width;
  const auto qm = random_mat<double>(len, d, rng), km = random_mat<double>(len, d, rng),
             vm = random_mat<double>(len, d, rng);
  auto to_tensor = [len, d](const Mat<double>& m) {
    return Tensor::matrix(len, d, std::vector<double>(m.data(), m.data() + m.size()));
  };
  const Tensor q = to_tensor(qm), k = to_tensor(km), v = to_tensor(vm);
  const double alpha = alpha_schedule(1)[0];
  const std::size_t io = 4 * len * d * sizeof(double);
  const std::size_t m = std::min(cfg.segment_len, len);
  std::vector<BenchRow> rows;
  auto time_mode = [&](RetentionMode mode) {
    return best_ms(cfg.repeats, [&] {
      Graph g;
      const Tensor out = retention(g.leaf(q), g.leaf(k), g.leaf(v), alpha, mode, cfg.segment_len);
      (void)g.backward(sum(out));
    });
  };
  // Backward keeps per-step (recurrent) or per-segment (chunkwise) states.
  rows.push_back({len, "parallel", time_mode(RetentionMode::parallel), 2 * io + 4 * len * len * sizeof(double)});
  rows.push_back({len, "chunkwise", time_mode(RetentionMode::chunkwise),
                  2 * io + (4 * m * m + ((len + m - 1) / m + 1) * d * d) * sizeof(double)});
  rows.push_back({len, "recurrent", time_mode(RetentionMode::recurrent), 2 * io + (len + 1) * d * d * sizeof(double)});
  rows.push_back({len, "softmax",
                  best_ms(cfg.repeats,
                          [&] {
                            const Mat<double> out = softmax_attention<double>(qm, km, vm);
                            const Mat<double> g = Mat<double>::Ones(out.rows(), out.cols());
                            Mat<double> dq(qm.rows(), d), dk(qm.rows(), d), dv(qm.rows(), d);
                            softmax_attention_backward(qm, km, vm, g, dq, dk, dv);
                          }),
                  2 * io + 3 * len * len * sizeof(double)});
  return rows;
}

}  // namespace

std::vector<BenchRow> run_bench(const BenchConfig& cfg) {
  if (cfg.width == 0 || cfg.segment_len == 0) throw std::invalid_argument("bench: width and segment length must be >= 1");
  Rng rng = make_rng(cfg.seed, {0xbe7c});
  std::vector<BenchRow> rows;
  for (auto len : cfg.lengths) {
    if (len == 0) throw std::invalid_argument("bench: lengths must be >= 1");
    auto part = cfg.backward ? backward_rows(cfg, len, rng)
                             : (cfg.single_precision ? forward_rows<float>(cfg, len, rng)
                                                     : forward_rows<double>(cfg, len, rng));
    rows.insert(rows.end(), part.begin(), part.end());
  }
  return rows;
}

void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows) {
  out << "length,mode,wall_ms,peak_bytes\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.6f", r.wall_ms);
    out << r.length << ',' << r.mode << ',' << buf << ',' << r.peak_bytes << '\n';
  }
}

double recurrent_step_ns(std::size_t position, std::size_t width, std::size_t repeats, std::uint64_t seed) {
  constexpr std::size_t kTimed = 256;
  Rng rng = make_rng(seed, {0x57e9});
  const auto total = position + kTimed;
  const Mat<double> q = random_mat<double>(total, width, rng), k = random_mat<double>(total, width, rng),
                    v = random_mat<double>(total, width, rng);
  const double alpha = alpha_schedule(1)[0];
  Mat<double> out(1, static_cast<Eigen::Index>(width));
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < std::max<std::size_t>(repeats, 1); ++r) {
    RetentionState<double> st(width, width);
    for (std::size_t n = 0; n < position; ++n) {
      const auto i = static_cast<Eigen::Index>(n);
      recurrent_step(q.row(i), k.row(i), v.row(i), alpha, st, out.row(0));
    }
    const auto t0 = Clock::now();
    for (std::size_t n = position; n < total; ++n) {
      const auto i = static_cast<Eigen::Index>(n);
      recurrent_step(q.row(i), k.row(i), v.row(i), alpha, st, out.row(0));
    }
    const auto t1 = Clock::now();
    best = std::min(best, std::chrono::duration<double, std::nano>(t1 - t0).count() / kTimed);
  }
  return best;
}

}  // namespace maskrdt
