#include <cmath>

#include "gia/autodiff.hpp"
#include "gia/errors.hpp"
#include "kernels.hpp"

namespace gia::ad {

Executor::Executor(const Graph& graph, std::vector<NodeId> targets, std::vector<NodeId> varying)
    : graph_(&graph), targets_(std::move(targets)) {
  const std::size_t n = graph.size();
  std::vector<char> needed(n, 0);
  for (auto t : targets_) {
    if (!t.valid() || t.index >= n) throw PreconditionError("eval target refers to unknown node");
    needed[t.index] = 1;
  }
  for (std::size_t i = n; i-- > 0;) {
    if (!needed[i]) continue;
    for (auto in : graph.node(NodeId{static_cast<std::uint32_t>(i)}).inputs) needed[in.index] = 1;
  }
  is_static_.assign(n, 0);
  if (!varying.empty()) {
    std::vector<char> dynamic(n, 0);
    for (auto v : varying) dynamic.at(v.index) = 1;
    for (std::size_t i = 0; i < n; ++i) {
      for (auto in : graph.node(NodeId{static_cast<std::uint32_t>(i)}).inputs) dynamic[i] |= dynamic[in.index];
      is_static_[i] = !dynamic[i];
    }
  }
  for (std::uint32_t i = 0; i < n; ++i) {
    if (needed[i]) order_.push_back(i);
  }
  values_.resize(n);
}

const Tensor& Executor::value(NodeId id) const { return values_.at(id.index); }

void Executor::run(const Bindings& bindings) {
  for (auto i : order_) {
    const Node& node = graph_->node(NodeId{i});
    if (primed_ && is_static_[i]) continue;
    if (node.op == Op::Leaf) {
      auto it = bindings.find(NodeId{i});
      if (it == bindings.end()) throw PreconditionError("unbound leaf '" + node.name + "'");
      if (it->second.shape() != node.shape) {
        throw ShapeError("leaf '" + node.name + "' bound with shape " + shape_str(it->second.shape()) +
                         ", expected " + shape_str(node.shape));
      }
      if (!it->second.all_finite()) throw NonFiniteError("leaf '" + node.name + "' holds non-finite values");
      values_[i] = it->second;
      continue;
    }
    compute(i);
  }
  primed_ = true;
}

void Executor::compute(std::uint32_t i) {
  const Node& node = graph_->node(NodeId{i});
  Tensor& out = values_[i];
  if (out.shape() != node.shape || out.numel() != shape_numel(node.shape)) out = Tensor(node.shape);
  auto in = [&](std::size_t k) -> const Tensor& { return values_[node.inputs[k].index]; };
  const std::size_t count = out.numel();
  double* o = out.data().data();

  auto map1 = [&](auto fn) {
    const double* a = in(0).data().data();
    for (std::size_t j = 0; j < count; ++j) o[j] = fn(a[j]);
  };
  auto map2 = [&](auto fn) {
    const double* a = in(0).data().data();
    const double* b = in(1).data().data();
    for (std::size_t j = 0; j < count; ++j) o[j] = fn(a[j], b[j]);
  };

  switch (node.op) {
    case Op::Leaf: break;
    case Op::Constant: out = *node.constant; break;
    case Op::Add: map2([](double a, double b) { return a + b; }); break;
    case Op::Sub: map2([](double a, double b) { return a - b; }); break;
    case Op::Mul: map2([](double a, double b) { return a * b; }); break;
    case Op::Div: map2([](double a, double b) { return a / b; }); break;
    case Op::EqualMask: map2([](double a, double b) { return a == b ? 1.0 : 0.0; }); break;
    case Op::Neg: map1([](double a) { return -a; }); break;
    case Op::Scale: {
      const double s = node.scalar;
      map1([s](double a) { return a * s; });
      break;
    }
    case Op::AddScalar: {
      const double s = node.scalar;
      map1([s](double a) { return a + s; });
      break;
    }
    case Op::Square: map1([](double a) { return a * a; }); break;
    case Op::Sqrt: map1([](double a) { return std::sqrt(a); }); break;
    case Op::Exp: map1([](double a) { return std::exp(a); }); break;
    case Op::Log: map1([](double a) { return std::log(a); }); break;
    case Op::Relu: map1([](double a) { return a > 0.0 ? a : 0.0; }); break;
    case Op::StepMask: map1([](double a) { return a > 0.0 ? 1.0 : 0.0; }); break;
    case Op::StopGradient:
    case Op::Reshape: map1([](double a) { return a; }); break;
    case Op::MatMul: kernels::matmul(in(0), in(1), out); break;
    case Op::Transpose: kernels::transpose(in(0), out); break;
    case Op::Conv2d: kernels::conv2d(in(0), in(1), node.conv, out); break;
    case Op::Conv2dInputGrad: kernels::conv2d_input_grad(in(0), in(1), node.conv, out); break;
    case Op::Conv2dWeightGrad: kernels::conv2d_weight_grad(in(0), in(1), node.conv, out); break;
    case Op::SumTo: kernels::sum_to(in(0), out); break;
    case Op::BroadcastTo: kernels::broadcast_to(in(0), out); break;
    case Op::MaxTo: kernels::max_to(in(0), out); break;
    case Op::Pad: kernels::pad(in(0), node.offsets, out); break;
    case Op::Slice: kernels::slice(in(0), node.offsets, out); break;
    case Op::BatchNormTrain: kernels::batchnorm_train(in(0), node.scalar, out); break;
  }
  for (std::size_t j = 0; j < out.numel(); ++j) {
    if (!std::isfinite(out[j])) {
      throw NonFiniteError(std::string("non-finite value produced by ") + op_name(node.op) + " node " +
                           std::to_string(i));
    }
  }
}

std::vector<Tensor> eval(const Graph& graph, const Bindings& bindings, std::span<const NodeId> targets) {
  Executor ex(graph, std::vector<NodeId>(targets.begin(), targets.end()));
  ex.run(bindings);
  std::vector<Tensor> out;
  out.reserve(targets.size());
  for (auto t : targets) out.push_back(ex.value(t));
  return out;
}

Tensor eval1(const Graph& graph, const Bindings& bindings, NodeId target) {
  const NodeId t[] = {target};
  return eval(graph, bindings, t).front();
}

}  // namespace gia::ad
