// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the test binaries: random tensors, a central-difference
// gradient oracle and scratch directories.

#pragma once

#include "maskrdt/model.hpp"
#include "maskrdt/numerics.hpp"
#include "maskrdt/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <string>
#include <vector>

namespace maskrdt::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  std::vector<double> v(n);
  for (auto& x : v) x = normal(rng, scale);
  return Tensor(std::move(shape), std::move(v));
}

inline Mat<double> random_mat(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  Mat<double> m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng, scale);
  return m;
}

inline Tensor to_tensor(const Mat<double>& m) {
  return Tensor::matrix(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()),
                        std::vector<double>(m.data(), m.data() + m.size()));
}

inline Mat<double> to_mat(const Tensor& t) {
  Mat<double> m(static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
  std::copy(t.data().begin(), t.data().end(), m.data());
  return m;
}

inline Tensor with_value(const Tensor& t, std::size_t i, double v) {
  std::vector<double> d(t.data().begin(), t.data().end());
  d[i] = v;
  return Tensor(t.shape(), std::move(d));
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ||a - n|| / max(||a||, ||n||); 0 when both vanish.
inline double rel_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double denom = std::sqrt(std::max(na, nn));
  if (denom < 1e-12) return std::sqrt(diff);
  return std::sqrt(diff) / denom;
}

// f maps the (off-graph) inputs to a scalar. Returns the central-difference
// gradient of each input.
inline std::vector<std::vector<double>> numeric_grad(const std::function<double(const std::vector<Tensor>&)>& f,
                                                     const std::vector<Tensor>& inputs, double h = 1e-5) {
  std::vector<std::vector<double>> out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<double> g(inputs[k].numel());
    for (std::size_t i = 0; i < g.size(); ++i) {
      auto plus = inputs, minus = inputs;
      plus[k] = with_value(inputs[k], i, inputs[k][i] + h);
      minus[k] = with_value(inputs[k], i, inputs[k][i] - h);
      g[i] = (f(plus) - f(minus)) / (2 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

// Analytic gradients of f built on a fresh graph.
inline std::vector<std::vector<double>> analytic_grad(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                                      const std::vector<Tensor>& inputs) {
  Graph g;
  std::vector<Tensor> leaves;
  for (const auto& t : inputs) leaves.push_back(g.leaf(t));
  const auto loss = f(leaves);
  const auto grads = g.backward(loss);
  std::vector<std::vector<double>> out;
  for (const auto& l : leaves) {
    const Tensor g = grads.of(l);
    out.emplace_back(g.data().begin(), g.data().end());
  }
  return out;
}

// Worst per-input relative error between analytic and numeric gradients of f.
inline double gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f, const std::vector<Tensor>& inputs,
                        double h = 1e-5) {
  const auto a = analytic_grad(f, inputs);
  const auto n = numeric_grad([&](const std::vector<Tensor>& x) { return f(x).item(); }, inputs, h);
  double worst = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, rel_error(a[k], n[k]));
  return worst;
}

// Weighted sum so every output element carries a distinct gradient.
inline Tensor probe_loss(const Tensor& out, Rng& rng) {
  const auto w = random_tensor(out.shape(), rng);
  return sum(mul(out, w));
}

class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("maskrdt_" + tag + "_" + std::to_string(rd()) + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spit(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << s;
}

}  // namespace maskrdt::test
