#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gamblenet/losses.hpp"
#include "gamblenet/tensor.hpp"

namespace gamblenet::nn {

/// Named trainable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
};

/// Handle to a node of a Graph.
struct Var {
  int id = -1;
  bool valid() const noexcept { return id >= 0; }
};

/// Single-use reverse-mode tape. Nodes are appended in evaluation order, so
/// reverse insertion order is a valid topological order for backward().
class Graph {
 public:
  using Backward = std::function<void(Graph&, int self)>;

  Var constant(Tensor value);
  /// Leaf whose gradient is recorded when `requires_grad` is set.
  Var input(Tensor value, bool requires_grad);
  /// Leaf bound to a parameter; gradients flow into `param.grad` on
  /// backward() only if the parameter is trainable.
  Var parameter(Parameter& param);

  Var record(Tensor value, std::initializer_list<Var> parents, Backward backward);

  const Tensor& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  /// Gradient of the last backward() target; zero tensor if none reached v.
  const Tensor& grad(Var v);
  /// Accumulation target for backward closures.
  Tensor& grad_buffer(Var v);

  /// Seeds d(out)/d(out) = 1 for a scalar node and propagates.
  void backward(Var out);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    Backward backward;
  };

  Node& node(Var v);
  const Node& node(Var v) const;

  std::vector<std::unique_ptr<Node>> nodes_;
};

// Layers ------------------------------------------------------------------

/// 2-D convolution. weight: (out, in, k*k); bias: (out, 1, 1).
Var conv2d(Graph& g, Var x, Var weight, Var bias, int kernel, int stride, int pad);
/// Transposed convolution (adjoint of conv2d). weight: (in, out, k*k).
Var conv_transpose2d(Graph& g, Var x, Var weight, Var bias, int kernel, int stride, int pad);
/// Per-sample, per-channel normalization with affine gamma/beta of shape (C,1,1).
Var instance_norm(Graph& g, Var x, Var gamma, Var beta, double eps = 1e-5);
Var leaky_relu(Graph& g, Var x, double slope);
Var relu(Graph& g, Var x);
Var sigmoid(Graph& g, Var x);
/// Softmax across channels at every pixel.
Var softmax(Graph& g, Var x);
Var concat(Graph& g, Var a, Var b);
/// Same value, no gradient path.
Var detach(Graph& g, Var x);

// Scalar arithmetic on (1,1,1) nodes ---------------------------------------

Var add(Graph& g, Var a, Var b);
Var subtract(Graph& g, Var a, Var b);
Var scale(Graph& g, Var a, double factor);

// Loss nodes ----------------------------------------------------------------

Var cross_entropy(Graph& g, Var pred, const LabelMap& label);
Var focal(Graph& g, Var pred, const LabelMap& label, double gamma);
Var normalize_bets(Graph& g, Var raw, double beta, std::span<const std::uint8_t> ignore = {});
/// Gambler objective on (pred, bets).
Var gambling(Graph& g, Var pred, const LabelMap& label, Var bets, losses::BetScale scale);
Var bce_mean(Graph& g, Var scores, double target);
Var embedding_distance(Graph& g, Var fake, Var real);
/// 0.5 * sum of (x - target)^2.
Var squared_error(Graph& g, Var x, const Tensor& target);

// Raw kernels, exposed for tests --------------------------------------------

int conv_output_size(int input, int kernel, int stride, int pad);
int conv_transpose_output_size(int input, int kernel, int stride, int pad);

}  // namespace gamblenet::nn
