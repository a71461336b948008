// SPDX-License-Identifier: Apache-2.0
//
// Cost measurements for retention against a causal softmax-attention
// reference of the same width. The reference lives here only; the model never
// uses it.

#pragma once

#include "maskrdt/retention.hpp"

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

namespace maskrdt {

template <typename T>
Mat<T> softmax_attention(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v) {
  const auto n = q.rows();
  Mat<T> p = (q * k.transpose()) * static_cast<T>(1.0 / std::sqrt(static_cast<double>(q.cols())));
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = r + 1; c < n; ++c) p(r, c) = -std::numeric_limits<T>::infinity();
    const T mx = p.row(r).head(r + 1).maxCoeff();
    p.row(r) = (p.row(r).array() - mx).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p * v;
}

struct BenchConfig {
  std::vector<std::size_t> lengths{128, 1024};
  std::size_t width = 64;        // per-head dimension d
  std::size_t segment_len = 64;  // chunkwise M
  std::size_t repeats = 5;
  bool backward = false;         // time forward+backward through the autograd ops
  bool single_precision = true;  // f32 kernels for forward-only timing
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::size_t length = 0;
  std::string mode;
  double wall_ms = 0.0;
  std::size_t peak_bytes = 0;  // live buffers of the algorithm, inputs included
};

std::vector<BenchRow> run_bench(const BenchConfig& cfg);
void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows);

// Mean wall time of one recurrent step taken after `position` tokens have
// already been absorbed into the state. Best of `repeats`.
double recurrent_step_ns(std::size_t position, std::size_t width, std::size_t repeats = 5, std::uint64_t seed = 0);

}  // namespace maskrdt
