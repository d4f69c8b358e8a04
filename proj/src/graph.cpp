#include <algorithm>

#include "gia/autodiff.hpp"
#include "gia/errors.hpp"

namespace gia::ad {
namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

bool broadcastable(const Shape& small, const Shape& big) {
  if (small.empty()) return true;
  if (small.size() != big.size()) return false;
  for (std::size_t i = 0; i < big.size(); ++i) {
    if (small[i] != big[i] && small[i] != 1) return false;
  }
  return true;
}

Shape conv_output_shape(const Shape& x, const Shape& w, ConvGeometry g) {
  require(x.size() == 4 && w.size() == 4, "conv2d expects 4-D input and kernel");
  require(x[1] == w[1], "conv2d channel mismatch: input " + shape_str(x) + " kernel " + shape_str(w));
  require(g.stride >= 1, "conv2d stride must be >= 1");
  require(x[2] + 2 * g.pad >= w[2] && x[3] + 2 * g.pad >= w[3], "conv2d kernel larger than padded input");
  return Shape{x[0], w[0], (x[2] + 2 * g.pad - w[2]) / g.stride + 1, (x[3] + 2 * g.pad - w[3]) / g.stride + 1};
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::Square: return "square";
    case Op::Sqrt: return "sqrt";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Relu: return "relu";
    case Op::StepMask: return "step_mask";
    case Op::EqualMask: return "equal_mask";
    case Op::StopGradient: return "stop_gradient";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Conv2d: return "conv2d";
    case Op::Conv2dInputGrad: return "conv2d_input_grad";
    case Op::Conv2dWeightGrad: return "conv2d_weight_grad";
    case Op::SumTo: return "sum_to";
    case Op::BroadcastTo: return "broadcast_to";
    case Op::MaxTo: return "max_to";
    case Op::Reshape: return "reshape";
    case Op::Pad: return "pad";
    case Op::Slice: return "slice";
    case Op::BatchNormTrain: return "batchnorm_train";
  }
  return "?";
}

NodeId Graph::push(Node n) {
  for (auto in : n.inputs) require(in.valid() && in.index < nodes_.size(), "graph input refers to unknown node");
  nodes_.push_back(std::move(n));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

NodeId Graph::leaf(std::string name, Shape shape, LeafKind kind) {
  Node n;
  n.op = Op::Leaf;
  n.shape = std::move(shape);
  n.leaf_kind = kind;
  n.name = std::move(name);
  return push(std::move(n));
}

NodeId Graph::constant(Tensor value) {
  Node n;
  n.op = Op::Constant;
  n.shape = value.shape();
  n.constant = std::make_shared<const Tensor>(std::move(value));
  return push(std::move(n));
}

NodeId Graph::elementwise(Op op, NodeId a, NodeId b) {
  require(shape(a) == shape(b), std::string(op_name(op)) + " shape mismatch: " + shape_str(shape(a)) + " vs " +
                                    shape_str(shape(b)));
  Node n;
  n.op = op;
  n.inputs = {a, b};
  n.shape = shape(a);
  return push(std::move(n));
}

NodeId Graph::unary(Op op, NodeId a, double scalar) {
  Node n;
  n.op = op;
  n.inputs = {a};
  n.shape = shape(a);
  n.scalar = scalar;
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) { return elementwise(Op::Add, a, b); }
NodeId Graph::sub(NodeId a, NodeId b) { return elementwise(Op::Sub, a, b); }
NodeId Graph::mul(NodeId a, NodeId b) { return elementwise(Op::Mul, a, b); }
NodeId Graph::div(NodeId a, NodeId b) { return elementwise(Op::Div, a, b); }
NodeId Graph::equal_mask(NodeId a, NodeId b) { return elementwise(Op::EqualMask, a, b); }
NodeId Graph::neg(NodeId a) { return unary(Op::Neg, a); }
NodeId Graph::scale(NodeId a, double s) { return unary(Op::Scale, a, s); }
NodeId Graph::add_scalar(NodeId a, double s) { return unary(Op::AddScalar, a, s); }
NodeId Graph::square(NodeId a) { return unary(Op::Square, a); }
NodeId Graph::sqrt(NodeId a) { return unary(Op::Sqrt, a); }
NodeId Graph::exp(NodeId a) { return unary(Op::Exp, a); }
NodeId Graph::log(NodeId a) { return unary(Op::Log, a); }
NodeId Graph::relu(NodeId a) { return unary(Op::Relu, a); }
NodeId Graph::step_mask(NodeId a) { return unary(Op::StepMask, a); }
NodeId Graph::stop_gradient(NodeId a) { return unary(Op::StopGradient, a); }

NodeId Graph::batchnorm_train(NodeId x, double epsilon) {
  require(shape(x).size() == 4, "batchnorm_train expects N x C x H x W");
  require(epsilon >= 0.0, "batchnorm epsilon must be non-negative");
  return unary(Op::BatchNormTrain, x, epsilon);
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const auto& sa = shape(a);
  const auto& sb = shape(b);
  require(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0],
          "matmul shape mismatch: " + shape_str(sa) + " x " + shape_str(sb));
  Node n;
  n.op = Op::MatMul;
  n.inputs = {a, b};
  n.shape = {sa[0], sb[1]};
  return push(std::move(n));
}

NodeId Graph::transpose(NodeId a) {
  const auto& sa = shape(a);
  require(sa.size() == 2, "transpose expects a 2-D tensor");
  Node n;
  n.op = Op::Transpose;
  n.inputs = {a};
  n.shape = {sa[1], sa[0]};
  return push(std::move(n));
}

NodeId Graph::conv2d(NodeId x, NodeId w, ConvGeometry geom) {
  Node n;
  n.op = Op::Conv2d;
  n.shape = conv_output_shape(shape(x), shape(w), geom);
  n.inputs = {x, w};
  n.conv = geom;
  return push(std::move(n));
}

NodeId Graph::conv2d_input_grad(NodeId gy, NodeId w, ConvGeometry geom, const Shape& input_shape) {
  require(conv_output_shape(input_shape, shape(w), geom) == shape(gy), "conv2d_input_grad geometry mismatch");
  Node n;
  n.op = Op::Conv2dInputGrad;
  n.shape = input_shape;
  n.inputs = {gy, w};
  n.conv = geom;
  return push(std::move(n));
}

NodeId Graph::conv2d_weight_grad(NodeId x, NodeId gy, ConvGeometry geom, const Shape& kernel_shape) {
  require(conv_output_shape(shape(x), kernel_shape, geom) == shape(gy), "conv2d_weight_grad geometry mismatch");
  Node n;
  n.op = Op::Conv2dWeightGrad;
  n.shape = kernel_shape;
  n.inputs = {x, gy};
  n.conv = geom;
  return push(std::move(n));
}

NodeId Graph::sum_to(NodeId a, Shape target) {
  require(broadcastable(target, shape(a)), "sum_to: " + shape_str(target) + " not reducible from " +
                                               shape_str(shape(a)));
  Node n;
  n.op = Op::SumTo;
  n.inputs = {a};
  n.shape = std::move(target);
  return push(std::move(n));
}

NodeId Graph::max_to(NodeId a, Shape target) {
  require(broadcastable(target, shape(a)), "max_to: incompatible target " + shape_str(target));
  Node n;
  n.op = Op::MaxTo;
  n.inputs = {a};
  n.shape = std::move(target);
  return push(std::move(n));
}

NodeId Graph::broadcast_to(NodeId a, Shape target) {
  require(broadcastable(shape(a), target), "broadcast_to: " + shape_str(shape(a)) + " not broadcastable to " +
                                               shape_str(target));
  Node n;
  n.op = Op::BroadcastTo;
  n.inputs = {a};
  n.shape = std::move(target);
  return push(std::move(n));
}

NodeId Graph::reshape(NodeId a, Shape target) {
  require(shape_numel(target) == shape_numel(shape(a)), "reshape element count mismatch");
  Node n;
  n.op = Op::Reshape;
  n.inputs = {a};
  n.shape = std::move(target);
  return push(std::move(n));
}

NodeId Graph::pad(NodeId a, std::vector<std::size_t> before, Shape out_shape) {
  const auto& s = shape(a);
  require(before.size() == s.size() && out_shape.size() == s.size(), "pad rank mismatch");
  for (std::size_t i = 0; i < s.size(); ++i) require(before[i] + s[i] <= out_shape[i], "pad window exceeds output");
  Node n;
  n.op = Op::Pad;
  n.inputs = {a};
  n.offsets = std::move(before);
  n.shape = std::move(out_shape);
  return push(std::move(n));
}

NodeId Graph::slice(NodeId a, std::vector<std::size_t> begin, Shape out_shape) {
  const auto& s = shape(a);
  require(begin.size() == s.size() && out_shape.size() == s.size(), "slice rank mismatch");
  for (std::size_t i = 0; i < s.size(); ++i) require(begin[i] + out_shape[i] <= s[i], "slice window out of range");
  Node n;
  n.op = Op::Slice;
  n.inputs = {a};
  n.offsets = std::move(begin);
  n.shape = std::move(out_shape);
  return push(std::move(n));
}

std::vector<NodeId> Graph::leaves(LeafKind kind) const {
  std::vector<NodeId> out;
  for (std::uint32_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].op == Op::Leaf && nodes_[i].leaf_kind == kind) out.push_back(NodeId{i});
  }
  return out;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  require(a.size() == b.size(), "broadcast rank mismatch: " + shape_str(a) + " vs " + shape_str(b));
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    require(a[i] == b[i] || a[i] == 1 || b[i] == 1, "broadcast mismatch: " + shape_str(a) + " vs " + shape_str(b));
    out[i] = std::max(a[i], b[i]);
  }
  return out;
}

namespace {

template <typename Build>
NodeId broadcast_binary(Graph& g, NodeId a, NodeId b, Build build) {
  const Shape out = broadcast_shape(g.shape(a), g.shape(b));
  if (g.shape(a) != out) a = g.broadcast_to(a, out);
  if (g.shape(b) != out) b = g.broadcast_to(b, out);
  return build(a, b);
}

}  // namespace

NodeId add_bc(Graph& g, NodeId a, NodeId b) {
  return broadcast_binary(g, a, b, [&](NodeId x, NodeId y) { return g.add(x, y); });
}
NodeId sub_bc(Graph& g, NodeId a, NodeId b) {
  return broadcast_binary(g, a, b, [&](NodeId x, NodeId y) { return g.sub(x, y); });
}
NodeId mul_bc(Graph& g, NodeId a, NodeId b) {
  return broadcast_binary(g, a, b, [&](NodeId x, NodeId y) { return g.mul(x, y); });
}
NodeId div_bc(Graph& g, NodeId a, NodeId b) {
  return broadcast_binary(g, a, b, [&](NodeId x, NodeId y) { return g.div(x, y); });
}

NodeId sum_all(Graph& g, NodeId a) { return g.sum_to(a, Shape{}); }

NodeId mean_all(Graph& g, NodeId a) {
  return g.scale(sum_all(g, a), 1.0 / static_cast<double>(shape_numel(g.shape(a))));
}

NodeId channel_sum(Graph& g, NodeId a) {
  const auto& s = g.shape(a);
  require(s.size() == 4, "channel reduction expects N x C x H x W");
  return g.sum_to(a, Shape{1, s[1], 1, 1});
}

NodeId channel_mean(Graph& g, NodeId a) {
  const auto& s = g.shape(a);
  require(s.size() == 4, "channel reduction expects N x C x H x W");
  return g.scale(channel_sum(g, a), 1.0 / static_cast<double>(s[0] * s[2] * s[3]));
}

}  // namespace gia::ad
