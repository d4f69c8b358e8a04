#include <algorithm>
#include <cmath>

#include "gia/autodiff.hpp"
#include "gia/errors.hpp"

namespace gia::ad {
namespace {

bool differentiable(Op op) {
  return op != Op::StepMask && op != Op::EqualMask && op != Op::StopGradient && op != Op::Constant;
}

// Training-mode normalization backward, built from primitives:
//   dx = (g - xhat * mean_c(g * xhat) - mean_c(g)) / sqrt(var_c + eps)
// where mean_c averages over the N*H*W elements of each channel.
NodeId batchnorm_train_vjp(Graph& g, NodeId x, NodeId xhat, NodeId gy, double eps) {
  const NodeId mean = channel_mean(g, x);
  const NodeId centered = sub_bc(g, x, mean);
  const NodeId var = channel_mean(g, g.square(centered));
  const NodeId ones = g.constant(Tensor(g.shape(var), 1.0));
  const NodeId inv_std = g.div(ones, g.sqrt(g.add_scalar(var, eps)));
  const NodeId corr = mul_bc(g, xhat, channel_mean(g, g.mul(gy, xhat)));
  const NodeId shift = g.broadcast_to(channel_mean(g, gy), g.shape(gy));
  return mul_bc(g, g.sub(g.sub(gy, corr), shift), inv_std);
}

// Returns one adjoint per input; entries whose `need` flag is false stay invalid.
std::vector<NodeId> vjp(Graph& g, NodeId self, const std::vector<char>& need, NodeId gy) {
  const Node node = g.node(self);  // copy: building nodes may reallocate storage
  const auto& in = node.inputs;
  std::vector<NodeId> out(in.size());
  auto want = [&](std::size_t k) { return need[in[k].index] != 0; };

  switch (node.op) {
    case Op::Add:
      if (want(0)) out[0] = gy;
      if (want(1)) out[1] = gy;
      break;
    case Op::Sub:
      if (want(0)) out[0] = gy;
      if (want(1)) out[1] = g.neg(gy);
      break;
    case Op::Mul:
      if (want(0)) out[0] = g.mul(gy, in[1]);
      if (want(1)) out[1] = g.mul(gy, in[0]);
      break;
    case Op::Div:
      if (want(0)) out[0] = g.div(gy, in[1]);
      if (want(1)) out[1] = g.neg(g.div(g.mul(gy, self), in[1]));
      break;
    case Op::Neg: out[0] = g.neg(gy); break;
    case Op::Scale: out[0] = g.scale(gy, node.scalar); break;
    case Op::AddScalar:
    case Op::Reshape:
      out[0] = node.op == Op::Reshape ? g.reshape(gy, g.shape(in[0])) : gy;
      break;
    case Op::Square: out[0] = g.mul(gy, g.scale(in[0], 2.0)); break;
    case Op::Sqrt: out[0] = g.div(g.scale(gy, 0.5), self); break;
    case Op::Exp: out[0] = g.mul(gy, self); break;
    case Op::Log: out[0] = g.div(gy, in[0]); break;
    case Op::Relu: out[0] = g.mul(gy, g.step_mask(in[0])); break;
    case Op::MatMul:
      if (want(0)) out[0] = g.matmul(gy, g.transpose(in[1]));
      if (want(1)) out[1] = g.matmul(g.transpose(in[0]), gy);
      break;
    case Op::Transpose: out[0] = g.transpose(gy); break;
    case Op::Conv2d:
      if (want(0)) out[0] = g.conv2d_input_grad(gy, in[1], node.conv, g.shape(in[0]));
      if (want(1)) out[1] = g.conv2d_weight_grad(in[0], gy, node.conv, g.shape(in[1]));
      break;
    case Op::Conv2dInputGrad:
      // self = A(dy, w) with <u, A(dy, w)> = <dy, conv(u, w)>
      if (want(0)) out[0] = g.conv2d(gy, in[1], node.conv);
      if (want(1)) out[1] = g.conv2d_weight_grad(gy, in[0], node.conv, g.shape(in[1]));
      break;
    case Op::Conv2dWeightGrad:
      // self = W(x, dy) with <v, W(x, dy)> = <dy, conv(x, v)>
      if (want(0)) out[0] = g.conv2d_input_grad(in[1], gy, node.conv, g.shape(in[0]));
      if (want(1)) out[1] = g.conv2d(in[0], gy, node.conv);
      break;
    case Op::SumTo: out[0] = g.broadcast_to(gy, g.shape(in[0])); break;
    case Op::BroadcastTo: out[0] = g.sum_to(gy, g.shape(in[0])); break;
    case Op::MaxTo: {
      const Shape& s = g.shape(in[0]);
      const NodeId mask = g.equal_mask(in[0], g.broadcast_to(self, s));
      out[0] = g.mul(g.broadcast_to(gy, s), mask);
      break;
    }
    case Op::Pad: out[0] = g.slice(gy, node.offsets, g.shape(in[0])); break;
    case Op::Slice: out[0] = g.pad(gy, node.offsets, g.shape(in[0])); break;
    case Op::BatchNormTrain: out[0] = batchnorm_train_vjp(g, in[0], self, gy, node.scalar); break;
    case Op::Leaf:
    case Op::Constant:
    case Op::StepMask:
    case Op::EqualMask:
    case Op::StopGradient: break;
  }
  return out;
}

}  // namespace

std::vector<NodeId> grad(Graph& g, NodeId output, std::span<const NodeId> wrt) {
  if (!output.valid() || output.index >= g.size()) throw PreconditionError("grad output refers to unknown node");
  if (shape_numel(g.shape(output)) != 1) {
    throw ShapeError("grad requires a scalar output, got shape " + shape_str(g.shape(output)));
  }
  const std::uint32_t top = output.index;
  const std::size_t n = static_cast<std::size_t>(top) + 1;

  std::vector<char> ancestor(n, 0);
  ancestor[top] = 1;
  for (std::size_t i = n; i-- > 0;) {
    if (!ancestor[i]) continue;
    for (auto in : g.node(NodeId{static_cast<std::uint32_t>(i)}).inputs) ancestor[in.index] = 1;
  }

  std::vector<char> depends(n, 0);
  std::uint32_t lowest = top;
  for (auto w : wrt) {
    if (!w.valid() || w.index >= n || !ancestor[w.index]) {
      throw PreconditionError("grad: output is not reachable from node " + std::to_string(w.index));
    }
    depends[w.index] = 1;
    lowest = std::min(lowest, w.index);
  }
  for (std::size_t i = lowest; i < n; ++i) {
    const Node& node = g.node(NodeId{static_cast<std::uint32_t>(i)});
    if (!differentiable(node.op)) {
      depends[i] = depends[i] && node.op == Op::Leaf;
      continue;
    }
    for (auto in : node.inputs) depends[i] |= depends[in.index];
  }
  // Only nodes both downstream of wrt and upstream of output carry adjoints.
  std::vector<char> need(n, 0);
  for (std::size_t i = 0; i < n; ++i) need[i] = depends[i] && ancestor[i];

  std::vector<NodeId> adjoint(n);
  adjoint[top] = g.constant(Tensor(g.shape(output), 1.0));
  for (std::size_t i = n; i-- > lowest;) {
    if (!need[i] || !adjoint[i].valid()) continue;
    const NodeId self{static_cast<std::uint32_t>(i)};
    if (g.node(self).inputs.empty()) continue;
    auto contributions = vjp(g, self, need, adjoint[i]);
    const auto inputs = g.node(self).inputs;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (!contributions[k].valid()) continue;
      NodeId& acc = adjoint[inputs[k].index];
      acc = acc.valid() ? g.add(acc, contributions[k]) : contributions[k];
    }
  }

  std::vector<NodeId> result;
  result.reserve(wrt.size());
  for (auto w : wrt) {
    result.push_back(adjoint[w.index].valid() ? adjoint[w.index] : g.constant(Tensor(g.shape(w), 0.0)));
  }
  return result;
}

NodeId grad1(Graph& g, NodeId output, NodeId wrt) {
  const NodeId w[] = {wrt};
  return grad(g, output, w).front();
}

double check_gradient(Graph& g, NodeId output, NodeId leaf, const Tensor& point, const Bindings& bindings,
                      double step) {
  if (!(step > 0.0)) throw PreconditionError("check_gradient step must be positive");
  const NodeId analytic_id = grad1(g, output, leaf);
  Bindings b = bindings;
  b[leaf] = point;
  const Tensor analytic = eval1(g, b, analytic_id);

  Executor probe(g, {output}, {leaf});
  double worst = 0.0;
  Tensor x = point;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    b[leaf] = x;
    probe.run(b);
    const double up = probe.value(output).item();
    x[i] = orig - step;
    b[leaf] = x;
    probe.run(b);
    const double down = probe.value(output).item();
    x[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) throw NonFiniteError("check_gradient probe is not finite");
    const double fd = (up - down) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

}  // namespace gia::ad
