#pragma once

// Reverse-mode differentiation over an append-only expression graph.
//
// Every backward rule is expressed with the same primitive set used in the
// forward pass, so `grad` returns ordinary graph nodes that can themselves be
// differentiated again. That is what lets an attack objective built from a
// parameter gradient be minimized with respect to the input.

#include <compare>
#include <deque>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gia/tensor.hpp"

namespace gia::ad {

struct NodeId {
  std::uint32_t index = std::numeric_limits<std::uint32_t>::max();

  bool valid() const { return index != std::numeric_limits<std::uint32_t>::max(); }
  friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

enum class Op : std::uint8_t {
  Leaf,
  Constant,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Scale,      // x * scalar
  AddScalar,  // x + scalar
  Square,
  Sqrt,
  Exp,
  Log,
  Relu,
  StepMask,      // 1 where x > 0, else 0; carries no gradient
  EqualMask,     // 1 where a == b, else 0; carries no gradient
  StopGradient,  // identity forward, zero backward
  MatMul,        // [M,K] x [K,N]
  Transpose,     // 2-D
  Conv2d,        // x[N,C,H,W] * w[K,C,kh,kw], zero padding
  Conv2dInputGrad,   // adjoint of Conv2d with respect to its input
  Conv2dWeightGrad,  // adjoint of Conv2d with respect to its kernel
  SumTo,        // reduce by summation to a broadcast-compatible shape
  BroadcastTo,  // replicate size-1 axes (or a scalar)
  MaxTo,        // reduce by max to a broadcast-compatible shape
  Reshape,
  Pad,    // zero padding, offsets = leading pad per axis
  Slice,  // contiguous window, offsets = start per axis
  BatchNormTrain,  // per-channel normalization with the input's own statistics
};

const char* op_name(Op op);

enum class LeafKind : std::uint8_t { Parameter, Data };

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

struct Node {
  Op op = Op::Leaf;
  std::vector<NodeId> inputs;
  Shape shape;
  double scalar = 0.0;               // Scale / AddScalar factor, BatchNormTrain epsilon
  ConvGeometry conv;                 // Conv2d family
  std::vector<std::size_t> offsets;  // Pad / Slice
  LeafKind leaf_kind = LeafKind::Data;
  std::string name;                        // leaves only
  std::shared_ptr<const Tensor> constant;  // Constant payload
};

// Append-only node store. Node ids are stable; builders validate shapes at
// construction time and throw ShapeError on mismatch.
class Graph {
 public:
  NodeId leaf(std::string name, Shape shape, LeafKind kind = LeafKind::Data);
  NodeId constant(Tensor value);
  NodeId scalar_constant(double v) { return constant(Tensor::scalar(v)); }

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId div(NodeId a, NodeId b);
  NodeId neg(NodeId a);
  NodeId scale(NodeId a, double s);
  NodeId add_scalar(NodeId a, double s);
  NodeId square(NodeId a);
  NodeId sqrt(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId relu(NodeId a);
  NodeId step_mask(NodeId a);
  NodeId equal_mask(NodeId a, NodeId b);
  NodeId stop_gradient(NodeId a);
  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);
  NodeId conv2d(NodeId x, NodeId w, ConvGeometry geom);
  NodeId conv2d_input_grad(NodeId gy, NodeId w, ConvGeometry geom, const Shape& input_shape);
  NodeId conv2d_weight_grad(NodeId x, NodeId gy, ConvGeometry geom, const Shape& kernel_shape);
  NodeId sum_to(NodeId a, Shape shape);
  NodeId broadcast_to(NodeId a, Shape shape);
  NodeId max_to(NodeId a, Shape shape);
  NodeId reshape(NodeId a, Shape shape);
  NodeId pad(NodeId a, std::vector<std::size_t> before, Shape out_shape);
  NodeId slice(NodeId a, std::vector<std::size_t> begin, Shape out_shape);
  NodeId batchnorm_train(NodeId x, double epsilon);

  const Node& node(NodeId id) const { return nodes_.at(id.index); }
  const Shape& shape(NodeId id) const { return node(id).shape; }
  std::size_t size() const { return nodes_.size(); }
  std::vector<NodeId> leaves(LeafKind kind) const;

 private:
  NodeId push(Node n);
  NodeId elementwise(Op op, NodeId a, NodeId b);
  NodeId unary(Op op, NodeId a, double scalar = 0.0);

  std::deque<Node> nodes_;  // deque: references stay valid while appending
};

// Broadcasting helpers over the strict primitives. Shapes must agree per axis
// or be 1 (or be rank-0 scalars).
Shape broadcast_shape(const Shape& a, const Shape& b);
NodeId add_bc(Graph& g, NodeId a, NodeId b);
NodeId sub_bc(Graph& g, NodeId a, NodeId b);
NodeId mul_bc(Graph& g, NodeId a, NodeId b);
NodeId div_bc(Graph& g, NodeId a, NodeId b);
NodeId sum_all(Graph& g, NodeId a);
NodeId mean_all(Graph& g, NodeId a);
// Per-channel reduction of an N x C x H x W tensor to 1 x C x 1 x 1.
NodeId channel_sum(Graph& g, NodeId a);
NodeId channel_mean(Graph& g, NodeId a);

using Bindings = std::map<NodeId, Tensor>;

// Compiled evaluation plan. Nodes that do not depend on any `varying` leaf are
// computed on the first run and reused afterwards; with no varying leaves every
// run recomputes everything. Runs are deterministic for fixed leaf values.
class Executor {
 public:
  Executor(const Graph& graph, std::vector<NodeId> targets, std::vector<NodeId> varying = {});

  void run(const Bindings& bindings);
  const Tensor& value(NodeId id) const;
  const std::vector<NodeId>& targets() const { return targets_; }

 private:
  void compute(std::uint32_t i);

  const Graph* graph_;
  std::vector<NodeId> targets_;
  std::vector<std::uint32_t> order_;  // needed nodes, ascending
  std::vector<char> is_static_;
  std::vector<Tensor> values_;
  bool primed_ = false;
};

std::vector<Tensor> eval(const Graph& graph, const Bindings& bindings, std::span<const NodeId> targets);
Tensor eval1(const Graph& graph, const Bindings& bindings, NodeId target);

// Appends nodes computing d output / d wrt[i] and returns their ids. `output`
// must be scalar (a single element). The returned nodes are built from the
// same primitives and may be differentiated again.
std::vector<NodeId> grad(Graph& graph, NodeId output, std::span<const NodeId> wrt);
NodeId grad1(Graph& graph, NodeId output, NodeId wrt);

// Central-difference check of d output / d leaf at `point`. Other leaves come
// from `bindings`. Relative error per coordinate uses max(1, |analytic|) as
// denominator; the maximum over coordinates is returned.
double check_gradient(Graph& graph, NodeId output, NodeId leaf, const Tensor& point, const Bindings& bindings,
                      double step);

}  // namespace gia::ad
