// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major f64 tensors with a tape-based reverse-mode differentiation
// graph. Tensors are immutable values; a Tensor that carries a node handle
// participates in the Graph that produced it.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace maskrdt {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Graph;

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_ ? data_->size() : 0; }
  // Rank-1 tensors are treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }
  double item() const;

  Graph* graph() const { return graph_; }
  int node() const { return node_; }
  bool on_graph() const { return graph_ != nullptr; }

  // Same values, detached from any graph.
  Tensor detached() const;

 private:
  friend class Graph;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Graph* graph_ = nullptr;
  int node_ = -1;
};

enum class OpKind {
  leaf,
  matmul,
  add,
  sub,
  mul,
  scale,
  sigmoid,
  gelu,
  exp,
  pow,
  sum,
  mean,
  reshape,
  add_row,
  gather_rows,
  concat_rows,
  concat_cols,
  slice_cols,
  group_norm,
  rotate_pairs,
  retention,
  cross_entropy,
};

const char* op_name(OpKind kind);

// grad_in[i] is empty when input i is not on the graph.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<const std::span<double>> grad_in)>;

class Gradients {
 public:
  Gradients() = default;
  Gradients(std::vector<Shape> shapes, std::vector<std::vector<double>> grads);

  // Zero tensor of matching shape when `t` was unreachable from the loss.
  Tensor of(const Tensor& t) const;
  Tensor of(int node) const;
  std::size_t size() const { return shapes_.size(); }

 private:
  std::vector<Shape> shapes_;
  std::vector<std::vector<double>> grads_;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Registers a differentiable input.
  Tensor leaf(const Tensor& value);

  // Appends an op node. Inputs that are off-graph are recorded as constants.
  Tensor record(OpKind kind, Tensor value, std::span<const Tensor> inputs, BackwardFn backward);

  std::size_t size() const { return nodes_.size(); }
  OpKind kind(int node) const { return nodes_.at(static_cast<std::size_t>(node)).kind; }

  Gradients backward(const Tensor& loss) const;

 private:
  struct Node {
    OpKind kind;
    std::vector<int> inputs;
    Shape shape;
    std::size_t numel;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// ---- forward ops ----------------------------------------------------------
// Broadcasting is limited to scalar-vs-tensor and identical shapes.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor pow(const Tensor& a, double exponent);

// axis == nullopt reduces over every element to a scalar.
Tensor sum(const Tensor& a, std::optional<std::size_t> axis = std::nullopt);
Tensor mean(const Tensor& a, std::optional<std::size_t> axis = std::nullopt);

Tensor reshape(const Tensor& a, Shape shape);

// x[m×n] + bias[1×n] on every row.
Tensor add_row(const Tensor& x, const Tensor& bias);
// out[i] = x[index[i]]; backward scatter-adds.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);

// Per-row normalization over `groups` contiguous channel groups followed by a
// per-channel affine map. groups == 1 is layer normalization.
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t groups,
                  double eps);

// Rotates channel pairs (2j, 2j+1) of row r by angle (first_position + r) *
// theta[j mod period/2], where period is the per-head width.
Tensor rotate_pairs(const Tensor& x, std::span<const double> theta, std::size_t period,
                    std::size_t first_position = 0);

// Mean negative log-softmax of the target class per row.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

// Scalar helpers that do not register anything.
double sigmoid_value(double x);
double gelu_value(double x);
void check_finite(std::span<const double> values, const char* where);

}  // namespace maskrdt
