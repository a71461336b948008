// SPDX-License-Identifier: Apache-2.0

#include "maskrdt/numerics.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace maskrdt {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

constexpr double kClamp = 40.0;

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Graph* common_graph(std::span<const Tensor> inputs) {
  Graph* g = nullptr;
  for (const auto& t : inputs) {
    if (!t.on_graph()) continue;
    if (g != nullptr && g != t.graph()) {
      throw std::logic_error("inputs belong to different graphs");
    }
    g = t.graph();
  }
  return g;
}

// Finishes an op: checks finiteness and registers it when any input is tracked.
Tensor finish(OpKind kind, Shape shape, std::vector<double> out, std::initializer_list<Tensor> inputs,
              BackwardFn backward) {
  check_finite(out, op_name(kind));
  Tensor value(std::move(shape), std::move(out));
  std::span<const Tensor> span(inputs.begin(), inputs.size());
  Graph* g = common_graph(span);
  if (g == nullptr) return value;
  return g->record(kind, std::move(value), span, std::move(backward));
}

Tensor finish_many(OpKind kind, Shape shape, std::vector<double> out, std::span<const Tensor> inputs,
                   BackwardFn backward) {
  check_finite(out, op_name(kind));
  Tensor value(std::move(shape), std::move(out));
  Graph* g = common_graph(inputs);
  if (g == nullptr) return value;
  return g->record(kind, std::move(value), inputs, std::move(backward));
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + ": expected a matrix, got shape " + shape_str(t.shape()));
  }
}

enum class Broadcast { same, left_scalar, right_scalar };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() == b.shape()) return Broadcast::same;
  if (b.numel() == 1) return Broadcast::right_scalar;
  if (a.numel() == 1) return Broadcast::left_scalar;
  throw DimensionError(std::string(what) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
}

double phi(double x) { return 0.3989422804014327 * std::exp(-0.5 * x * x); }

template <typename F, typename DF>
Tensor unary(OpKind kind, const Tensor& a, F f, DF df) {
  auto in = a.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  auto saved = a.detached();
  return finish(kind, a.shape(), std::move(out), {a},
                [saved, df](std::span<const double> g, std::span<const std::span<double>> gi) {
                  if (gi[0].empty()) return;
                  auto x = saved.data();
                  for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * df(x[i]);
                });
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

void check_finite(std::span<const double> values, const char* where) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + where);
  }
}

double sigmoid_value(double x) {
  x = std::clamp(x, -kClamp, kClamp);
  return 1.0 / (1.0 + std::exp(-x));
}

double gelu_value(double x) {
  const double c = std::clamp(x, -kClamp, kClamp);
  return 0.5 * x * (1.0 + std::erf(c / std::sqrt(2.0)));
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::gelu: return "gelu";
    case OpKind::exp: return "exp";
    case OpKind::pow: return "pow";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::reshape: return "reshape";
    case OpKind::add_row: return "add_row";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::concat_rows: return "concat_rows";
    case OpKind::concat_cols: return "concat_cols";
    case OpKind::slice_cols: return "slice_cols";
    case OpKind::group_norm: return "group_norm";
    case OpKind::rotate_pairs: return "rotate_pairs";
    case OpKind::retention: return "retention";
    case OpKind::cross_entropy: return "cross_entropy";
  }
  return "?";
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  if (product(shape_) != data.size()) {
    throw DimensionError("shape " + shape_str(shape_) + " does not match " + std::to_string(data.size()) +
                         " elements");
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const auto n = product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

std::size_t Tensor::rows() const {
  if (shape_.empty()) return 1;
  return shape_.size() == 1 ? 1 : shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.empty()) return 1;
  return shape_.size() == 1 ? shape_[0] : numel() / shape_[0];
}

std::span<const double> Tensor::data() const {
  if (!data_) return {};
  return {data_->data(), data_->size()};
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
  return (*data_)[0];
}

Tensor Tensor::detached() const {
  Tensor t = *this;
  t.graph_ = nullptr;
  t.node_ = -1;
  return t;
}

// ---- Graph ----------------------------------------------------------------

Gradients::Gradients(std::vector<Shape> shapes, std::vector<std::vector<double>> grads)
    : shapes_(std::move(shapes)), grads_(std::move(grads)) {}

Tensor Gradients::of(int node) const {
  const auto i = static_cast<std::size_t>(node);
  if (node < 0 || i >= shapes_.size()) throw std::out_of_range("no such graph node");
  if (grads_[i].empty()) return Tensor::zeros(shapes_[i]);
  return Tensor(shapes_[i], grads_[i]);
}

Tensor Gradients::of(const Tensor& t) const {
  if (!t.on_graph()) throw std::invalid_argument("tensor is not on a graph");
  return of(t.node());
}

Tensor Graph::leaf(const Tensor& value) {
  Tensor t = value.detached();
  nodes_.push_back({OpKind::leaf, {}, t.shape(), t.numel(), {}});
  t.graph_ = this;
  t.node_ = static_cast<int>(nodes_.size() - 1);
  return t;
}

Tensor Graph::record(OpKind kind, Tensor value, std::span<const Tensor> inputs, BackwardFn backward) {
  std::vector<int> ids;
  ids.reserve(inputs.size());
  for (const auto& in : inputs) ids.push_back(in.on_graph() ? in.node() : -1);
  nodes_.push_back({kind, std::move(ids), value.shape(), value.numel(), std::move(backward)});
  value.graph_ = this;
  value.node_ = static_cast<int>(nodes_.size() - 1);
  return value;
}

Gradients Graph::backward(const Tensor& loss) const {
  if (loss.graph() != this) throw std::invalid_argument("loss is not on this graph");
  if (loss.numel() != 1) throw DimensionError("backward needs a scalar loss, got " + shape_str(loss.shape()));

  std::vector<std::vector<double>> grads(nodes_.size());
  const auto root = static_cast<std::size_t>(loss.node());
  grads[root].assign(1, 1.0);

  std::vector<std::span<double>> sinks;
  for (std::size_t i = root + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (grads[i].empty() || !node.backward) continue;
    sinks.clear();
    for (int in : node.inputs) {
      if (in < 0) {
        sinks.emplace_back();
        continue;
      }
      auto& g = grads[static_cast<std::size_t>(in)];
      if (g.empty()) g.assign(nodes_[static_cast<std::size_t>(in)].numel, 0.0);
      sinks.emplace_back(g.data(), g.size());
    }
    node.backward(grads[i], sinks);
  }

  std::vector<Shape> shapes;
  shapes.reserve(nodes_.size());
  for (const auto& n : nodes_) shapes.push_back(n.shape);
  return Gradients(std::move(shapes), std::move(grads));
}

// ---- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  auto sa = a.detached(), sb = b.detached();
  return finish(OpKind::matmul, {m, n}, std::move(out), {a, b},
                [sa, sb, m, k, n](std::span<const double> g, std::span<const std::span<double>> gi) {
                  ConstMap G(g.data(), m, n);
                  if (!gi[0].empty()) {
                    MutMap(gi[0].data(), m, k).noalias() += G * ConstMap(sb.data().data(), k, n).transpose();
                  }
                  if (!gi[1].empty()) {
                    MutMap(gi[1].data(), k, n).noalias() += ConstMap(sa.data().data(), m, k).transpose() * G;
                  }
                });
}

namespace {

// Elementwise binary with scalar-vs-tensor broadcasting. dfa/dfb return the
// local partial derivatives at (x, y).
template <typename F, typename DA, typename DB>
Tensor binary(OpKind kind, const Tensor& a, const Tensor& b, F f, DA dfa, DB dfb) {
  const auto bk = broadcast_kind(a, b, op_name(kind));
  const Tensor& big = bk == Broadcast::left_scalar ? b : a;
  const auto n = big.numel();
  auto xa = a.data(), xb = b.data();
  auto ia = [bk](std::size_t i) { return bk == Broadcast::left_scalar ? 0 : i; };
  auto ib = [bk](std::size_t i) { return bk == Broadcast::right_scalar ? 0 : i; };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(xa[ia(i)], xb[ib(i)]);
  auto sa = a.detached(), sb = b.detached();
  return finish(kind, big.shape(), std::move(out), {a, b},
                [sa, sb, ia, ib, dfa, dfb](std::span<const double> g, std::span<const std::span<double>> gi) {
                  auto x = sa.data(), y = sb.data();
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    const double xv = x[ia(i)], yv = y[ib(i)];
                    if (!gi[0].empty()) gi[0][ia(i)] += g[i] * dfa(xv, yv);
                    if (!gi[1].empty()) gi[1][ib(i)] += g[i] * dfb(xv, yv);
                  }
                });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      OpKind::add, a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      OpKind::sub, a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      OpKind::mul, a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      OpKind::scale, a, [factor](double x) { return factor * x; }, [factor](double) { return factor; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(OpKind::sigmoid, a, sigmoid_value, [](double x) {
    if (x <= -kClamp || x >= kClamp) return 0.0;
    const double s = sigmoid_value(x);
    return s * (1.0 - s);
  });
}

Tensor gelu(const Tensor& a) {
  return unary(OpKind::gelu, a, gelu_value, [](double x) {
    const double c = std::clamp(x, -kClamp, kClamp);
    return 0.5 * (1.0 + std::erf(c / std::sqrt(2.0))) + x * phi(c) * (c == x ? 1.0 : 0.0);
  });
}

Tensor exp(const Tensor& a) {
  return unary(
      OpKind::exp, a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Tensor pow(const Tensor& a, double exponent) {
  return unary(
      OpKind::pow, a, [exponent](double x) { return std::pow(x, exponent); },
      [exponent](double x) { return exponent * std::pow(x, exponent - 1.0); });
}

namespace {

Tensor reduce(OpKind kind, const Tensor& a, std::optional<std::size_t> axis) {
  const bool is_mean = kind == OpKind::mean;
  auto x = a.data();
  if (!axis) {
    if (a.numel() == 0) throw DimensionError("reduce over an empty tensor");
    double s = 0.0;
    for (double v : x) s += v;
    const double f = is_mean ? 1.0 / static_cast<double>(x.size()) : 1.0;
    return finish(kind, {}, {s * f}, {a}, [f](std::span<const double> g, std::span<const std::span<double>> gi) {
      if (gi[0].empty()) return;
      for (double& v : gi[0]) v += g[0] * f;
    });
  }
  if (*axis >= a.rank()) {
    throw DimensionError("reduce: axis " + std::to_string(*axis) + " out of range for shape " +
                         shape_str(a.shape()));
  }
  const auto& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < *axis; ++i) outer *= s[i];
  for (std::size_t i = *axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[*axis];
  if (len == 0) throw DimensionError("reduce over an empty axis");
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != *axis) out_shape.push_back(s[i]);
  }
  const double f = is_mean ? 1.0 / static_cast<double>(len) : 1.0;
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * len + l) * inner + i];
  for (double& v : out) v *= f;
  return finish(kind, std::move(out_shape), std::move(out), {a},
                [outer, inner, len, f](std::span<const double> g, std::span<const std::span<double>> gi) {
                  if (gi[0].empty()) return;
                  for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t l = 0; l < len; ++l)
                      for (std::size_t i = 0; i < inner; ++i) gi[0][(o * len + l) * inner + i] += f * g[o * inner + i];
                });
}

}  // namespace

Tensor sum(const Tensor& a, std::optional<std::size_t> axis) { return reduce(OpKind::sum, a, axis); }
Tensor mean(const Tensor& a, std::optional<std::size_t> axis) { return reduce(OpKind::mean, a, axis); }

Tensor reshape(const Tensor& a, Shape shape) {
  if (product(shape) != a.numel()) {
    throw DimensionError("reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return finish(OpKind::reshape, std::move(shape), std::move(out), {a},
                [](std::span<const double> g, std::span<const std::span<double>> gi) {
                  if (gi[0].empty()) return;
                  for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                });
}

Tensor add_row(const Tensor& x, const Tensor& bias) {
  require_matrix(x, "add_row");
  const auto m = x.rows(), n = x.cols();
  if (bias.numel() != n) {
    throw DimensionError("add_row: bias " + shape_str(bias.shape()) + " vs " + shape_str(x.shape()));
  }
  auto xv = x.data(), bv = bias.data();
  std::vector<double> out(m * n);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = xv[r * n + c] + bv[c];
  return finish(OpKind::add_row, x.shape(), std::move(out), {x, bias},
                [m, n](std::span<const double> g, std::span<const std::span<double>> gi) {
                  for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < n; ++c) {
                      if (!gi[0].empty()) gi[0][r * n + c] += g[r * n + c];
                      if (!gi[1].empty()) gi[1][c] += g[r * n + c];
                    }
                });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  require_matrix(x, "gather_rows");
  const auto rows = x.rows(), n = x.cols();
  std::vector<std::size_t> idx(index.begin(), index.end());
  auto xv = x.data();
  std::vector<double> out(idx.size() * n);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows) throw DimensionError("gather_rows: row " + std::to_string(idx[i]) + " out of range");
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(idx[i] * n), n, out.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  Shape shape{idx.size(), n};
  return finish(OpKind::gather_rows, std::move(shape), std::move(out), {x},
                [idx = std::move(idx), n](std::span<const double> g, std::span<const std::span<double>> gi) {
                  if (gi[0].empty()) return;
                  for (std::size_t i = 0; i < idx.size(); ++i)
                    for (std::size_t c = 0; c < n; ++c) gi[0][idx[i] * n + c] += g[i * n + c];
                });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  const auto n = parts[0].cols();
  std::vector<std::size_t> offsets;
  std::vector<double> out;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) throw DimensionError("concat_rows: column mismatch at " + shape_str(p.shape()));
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
    rows += p.rows();
  }
  offsets.push_back(out.size());
  return finish_many(OpKind::concat_rows, {rows, n}, std::move(out), parts,
                     [offsets](std::span<const double> g, std::span<const std::span<double>> gi) {
                       for (std::size_t p = 0; p < gi.size(); ++p) {
                         if (gi[p].empty()) continue;
                         for (std::size_t i = offsets[p]; i < offsets[p + 1]; ++i) gi[p][i - offsets[p]] += g[i];
                       }
                     });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  const auto m = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) throw DimensionError("concat_cols: row mismatch at " + shape_str(p.shape()));
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> out(m * total);
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto v = parts[p].data();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < widths[p]; ++c) out[r * total + off + c] = v[r * widths[p] + c];
    off += widths[p];
  }
  return finish_many(OpKind::concat_cols, {m, total}, std::move(out), parts,
                     [widths, m, total](std::span<const double> g, std::span<const std::span<double>> gi) {
                       std::size_t o = 0;
                       for (std::size_t p = 0; p < gi.size(); ++p) {
                         if (!gi[p].empty()) {
                           for (std::size_t r = 0; r < m; ++r)
                             for (std::size_t c = 0; c < widths[p]; ++c) gi[p][r * widths[p] + c] += g[r * total + o + c];
                         }
                         o += widths[p];
                       }
                     });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_matrix(x, "slice_cols");
  const auto m = x.rows(), n = x.cols();
  if (begin >= end || end > n) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                         shape_str(x.shape()));
  }
  const auto w = end - begin;
  auto v = x.data();
  std::vector<double> out(m * w);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = v[r * n + begin + c];
  return finish(OpKind::slice_cols, {m, w}, std::move(out), {x},
                [m, n, w, begin](std::span<const double> g, std::span<const std::span<double>> gi) {
                  if (gi[0].empty()) return;
                  for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < w; ++c) gi[0][r * n + begin + c] += g[r * w + c];
                });
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t groups, double eps) {
  require_matrix(x, "group_norm");
  const auto m = x.rows(), n = x.cols();
  if (groups == 0 || n % groups != 0) {
    throw DimensionError("group_norm: " + std::to_string(n) + " channels not divisible into " +
                         std::to_string(groups) + " groups");
  }
  if (gamma.numel() != n || beta.numel() != n) throw DimensionError("group_norm: affine size mismatch");
  const auto gs = n / groups;
  auto xv = x.data(), gv = gamma.data(), bv = beta.data();
  std::vector<double> xhat(m * n), inv_std(m * groups), out(m * n);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t k = 0; k < groups; ++k) {
      const std::size_t base = r * n + k * gs;
      double mu = 0.0;
      for (std::size_t c = 0; c < gs; ++c) mu += xv[base + c];
      mu /= static_cast<double>(gs);
      double var = 0.0;
      for (std::size_t c = 0; c < gs; ++c) var += (xv[base + c] - mu) * (xv[base + c] - mu);
      var /= static_cast<double>(gs);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[r * groups + k] = is;
      for (std::size_t c = 0; c < gs; ++c) {
        const double h = (xv[base + c] - mu) * is;
        xhat[base + c] = h;
        out[base + c] = h * gv[k * gs + c] + bv[k * gs + c];
      }
    }
  auto sg = gamma.detached();
  return finish(OpKind::group_norm, x.shape(), std::move(out), {x, gamma, beta},
                [xhat = std::move(xhat), inv_std = std::move(inv_std), sg, m, n, groups, gs](
                    std::span<const double> g, std::span<const std::span<double>> gi) {
                  auto gam = sg.data();
                  for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t k = 0; k < groups; ++k) {
                      const std::size_t base = r * n + k * gs;
                      double sum_dh = 0.0, sum_dh_h = 0.0;
                      for (std::size_t c = 0; c < gs; ++c) {
                        const double dh = g[base + c] * gam[k * gs + c];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[base + c];
                        if (!gi[1].empty()) gi[1][k * gs + c] += g[base + c] * xhat[base + c];
                        if (!gi[2].empty()) gi[2][k * gs + c] += g[base + c];
                      }
                      if (gi[0].empty()) continue;
                      const double is = inv_std[r * groups + k];
                      const double inv_n = 1.0 / static_cast<double>(gs);
                      for (std::size_t c = 0; c < gs; ++c) {
                        const double dh = g[base + c] * gam[k * gs + c];
                        gi[0][base + c] += is * (dh - inv_n * sum_dh - xhat[base + c] * inv_n * sum_dh_h);
                      }
                    }
                });
}

Tensor rotate_pairs(const Tensor& x, std::span<const double> theta, std::size_t period, std::size_t first_position) {
  require_matrix(x, "rotate_pairs");
  const auto m = x.rows(), n = x.cols();
  if (period == 0 || period % 2 != 0 || n % period != 0 || theta.size() != period / 2) {
    throw DimensionError("rotate_pairs: bad period " + std::to_string(period) + " for " + shape_str(x.shape()));
  }
  // cos/sin table per (row, pair)
  const auto half = period / 2;
  std::vector<double> cs(m * half), sn(m * half);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < half; ++j) {
      const double ang = static_cast<double>(first_position + r) * theta[j];
      cs[r * half + j] = std::cos(ang);
      sn[r * half + j] = std::sin(ang);
    }
  auto v = x.data();
  std::vector<double> out(m * n);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; c += 2) {
      const std::size_t j = (c % period) / 2;
      const double x0 = v[r * n + c], x1 = v[r * n + c + 1];
      const double co = cs[r * half + j], si = sn[r * half + j];
      out[r * n + c] = x0 * co - x1 * si;
      out[r * n + c + 1] = x0 * si + x1 * co;
    }
  return finish(OpKind::rotate_pairs, x.shape(), std::move(out), {x},
                [cs = std::move(cs), sn = std::move(sn), m, n, half, period](std::span<const double> g,
                                                                             std::span<const std::span<double>> gi) {
                  if (gi[0].empty()) return;
                  for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < n; c += 2) {
                      const std::size_t j = (c % period) / 2;
                      const double co = cs[r * half + j], si = sn[r * half + j];
                      const double g0 = g[r * n + c], g1 = g[r * n + c + 1];
                      gi[0][r * n + c] += g0 * co + g1 * si;
                      gi[0][r * n + c + 1] += -g0 * si + g1 * co;
                    }
                });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  require_matrix(logits, "cross_entropy");
  const auto m = logits.rows(), n = logits.cols();
  if (targets.size() != m) throw DimensionError("cross_entropy: one target per row required");
  if (m == 0) throw DimensionError("cross_entropy: empty batch");
  auto v = logits.data();
  std::vector<double> probs(m * n);
  double loss = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    if (targets[r] >= n) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[r]) + " outside " +
                              std::to_string(n) + " classes");
    }
    const double mx = *std::max_element(v.begin() + static_cast<std::ptrdiff_t>(r * n),
                                        v.begin() + static_cast<std::ptrdiff_t>((r + 1) * n));
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(v[r * n + c] - mx);
    const double lz = std::log(z) + mx;
    for (std::size_t c = 0; c < n; ++c) probs[r * n + c] = std::exp(v[r * n + c] - lz);
    loss += lz - v[r * n + targets[r]];
  }
  loss /= static_cast<double>(m);
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  return finish(OpKind::cross_entropy, {}, {loss}, {logits},
                [probs = std::move(probs), tg = std::move(tg), m, n](std::span<const double> g,
                                                                     std::span<const std::span<double>> gi) {
                  if (gi[0].empty()) return;
                  const double f = g[0] / static_cast<double>(m);
                  for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < n; ++c)
                      gi[0][r * n + c] += f * (probs[r * n + c] - (c == tg[r] ? 1.0 : 0.0));
                });
}

}  // namespace maskrdt
