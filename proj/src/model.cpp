#include "gia/model.hpp"

#include <algorithm>
#include <cmath>

#include "gia/errors.hpp"
#include "gia/rng.hpp"

namespace gia::nn {
namespace {

using ad::Graph;
using ad::NodeId;

constexpr ad::ConvGeometry conv3x3(std::size_t stride) { return {stride, 1}; }
constexpr ad::ConvGeometry conv1x1(std::size_t stride) { return {stride, 0}; }

struct BlockInputs {
  NodeId conv1, conv2, proj;
  NodeId bn1_gamma, bn1_beta, bn2_gamma, bn2_beta;
  const RunningStat* bn1_running = nullptr;
  const RunningStat* bn2_running = nullptr;
};

const Tensor& running_or(const RunningStat* s, bool mean, const Tensor& fallback) {
  if (s == nullptr) return fallback;
  return mean ? s->mean : s->var;
}

NodeId block_graph(Graph& g, NodeId x, const BlockInputs& p, BlockStyle style, bool skip, std::size_t stride,
                   Mode mode, double eps, const std::string& prefix, std::vector<BnTap>& taps) {
  auto bn = [&](NodeId in, NodeId gamma, NodeId beta, const RunningStat* running, const std::string& name) {
    const std::size_t c = g.shape(in)[1];
    const Tensor zeros({c}, 0.0), ones({c}, 1.0);
    auto nodes = batchnorm_graph(g, in, gamma, beta, mode, running_or(running, true, zeros),
                                 running_or(running, false, ones), eps, name);
    taps.push_back(nodes.tap);
    return nodes.output;
  };
  auto shortcut = [&]() { return p.proj.valid() ? g.conv2d(x, p.proj, conv1x1(stride)) : x; };

  NodeId out;
  if (style == BlockStyle::PreActivation) {
    out = g.relu(bn(x, p.bn1_gamma, p.bn1_beta, p.bn1_running, prefix + ".bn1"));
    out = g.conv2d(out, p.conv1, conv3x3(stride));
    out = g.relu(bn(out, p.bn2_gamma, p.bn2_beta, p.bn2_running, prefix + ".bn2"));
    out = g.conv2d(out, p.conv2, conv3x3(1));
    if (skip) out = g.add(out, shortcut());
  } else {
    out = g.conv2d(x, p.conv1, conv3x3(stride));
    out = g.relu(bn(out, p.bn1_gamma, p.bn1_beta, p.bn1_running, prefix + ".bn1"));
    out = g.conv2d(out, p.conv2, conv3x3(1));
    out = bn(out, p.bn2_gamma, p.bn2_beta, p.bn2_running, prefix + ".bn2");
    if (skip) out = g.add(out, shortcut());
    out = g.relu(out);
  }
  return out;
}

}  // namespace

const char* block_style_name(BlockStyle style) {
  return style == BlockStyle::PreActivation ? "pre_activation" : "post_activation";
}

void ModelConfig::validate() const {
  if (depth < 1) throw PreconditionError("model depth must be >= 1");
  if (width_multiplier < 1) throw PreconditionError("width_multiplier must be >= 1");
  if (base_width < 1) throw PreconditionError("base_width must be >= 1");
  if (channels < 1 || height < 1 || width < 1) throw PreconditionError("input shape must be positive");
  if (num_classes < 1) throw PreconditionError("num_classes must be >= 1");
  if (!(bn_momentum > 0.0 && bn_momentum <= 1.0)) throw PreconditionError("bn momentum must be in (0, 1]");
  if (!(bn_epsilon > 0.0)) throw PreconditionError("bn epsilon must be positive");
}

void ModelParams::add(std::string name, Tensor value) {
  if (index_of(name)) throw PreconditionError("duplicate parameter name '" + name + "'");
  entries_.push_back({std::move(name), std::move(value)});
}

std::optional<std::size_t> ModelParams::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return i;
  }
  return std::nullopt;
}

const Tensor& ModelParams::get(const std::string& name) const {
  auto i = index_of(name);
  if (!i) throw PreconditionError("unknown parameter '" + name + "'");
  return entries_[*i].value;
}

Tensor& ModelParams::get(const std::string& name) {
  auto i = index_of(name);
  if (!i) throw PreconditionError("unknown parameter '" + name + "'");
  return entries_[*i].value;
}

std::size_t ModelParams::total_elements() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

void Batch::validate(const ModelConfig& config) const {
  if (images.rank() != 4) throw ShapeError("batch images must be B x C x H x W");
  if (images.dim(0) != labels.size()) throw PreconditionError("batch labels length differs from batch size");
  if (labels.empty()) throw PreconditionError("batch is empty");
  if (images.shape() != config.input_shape(labels.size())) {
    throw ShapeError("batch shape " + shape_str(images.shape()) + " does not match model input " +
                     shape_str(config.input_shape(labels.size())));
  }
  for (auto y : labels) {
    if (y >= config.num_classes) throw PreconditionError("label " + std::to_string(y) + " out of range");
  }
}

Architecture::Architecture(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const bool pre = config_.block_style == BlockStyle::PreActivation;
  const std::size_t w0 = config_.base_width * config_.width_multiplier;

  auto conv = [&](const std::string& name, std::size_t out, std::size_t in, std::size_t k) {
    layout_.emplace_back(name, Shape{out, in, k, k});
  };
  auto bn = [&](const std::string& name, std::size_t c) {
    layout_.emplace_back(name + ".gamma", Shape{c});
    layout_.emplace_back(name + ".beta", Shape{c});
    bn_layers_.emplace_back(name, c);
  };

  conv("stem.conv.weight", w0, config_.channels, 3);
  if (!pre) bn("stem.bn", w0);

  std::size_t in = w0;
  for (std::size_t i = 0; i < config_.depth; ++i) {
    Block b;
    b.prefix = "block" + std::to_string(i);
    const std::size_t stage = config_.stage_depth ? i / config_.stage_depth : 0;
    b.in = in;
    b.out = w0 << stage;
    b.stride = (config_.stage_depth && i > 0 && i % config_.stage_depth == 0) ? 2 : 1;
    b.projection = config_.skip_connections && (b.in != b.out || b.stride != 1);
    if (pre) {
      bn(b.prefix + ".bn1", b.in);
      conv(b.prefix + ".conv1.weight", b.out, b.in, 3);
      bn(b.prefix + ".bn2", b.out);
      conv(b.prefix + ".conv2.weight", b.out, b.out, 3);
    } else {
      conv(b.prefix + ".conv1.weight", b.out, b.in, 3);
      bn(b.prefix + ".bn1", b.out);
      conv(b.prefix + ".conv2.weight", b.out, b.out, 3);
      bn(b.prefix + ".bn2", b.out);
    }
    if (b.projection) conv(b.prefix + ".proj.weight", b.out, b.in, 1);
    in = b.out;
    blocks_.push_back(b);
  }
  layout_.emplace_back("fc.weight", Shape{in, config_.num_classes});
  layout_.emplace_back("fc.bias", Shape{config_.num_classes});
}

std::vector<std::size_t> Architecture::block_channels() const {
  std::vector<std::size_t> out;
  for (const auto& b : blocks_) out.push_back(b.out);
  return out;
}

RunningStats Architecture::initial_running_stats() const {
  RunningStats stats;
  for (const auto& [name, c] : bn_layers_) stats.push_back({name, Tensor({c}, 0.0), Tensor({c}, 1.0)});
  return stats;
}

ModelParams Architecture::initialize(std::uint64_t seed) const {
  Rng rng(seed);
  ModelParams params;
  for (const auto& [name, shape] : layout_) {
    Tensor t(shape);
    const bool gamma = name.ends_with(".gamma");
    const bool zero = name.ends_with(".beta") || name == "fc.bias";
    if (gamma) {
      std::fill(t.storage().begin(), t.storage().end(), 1.0);
    } else if (!zero) {
      const bool linear = name == "fc.weight";
      const std::size_t fan_in = linear ? shape[0] : shape[1] * shape[2] * shape[3];
      const double stddev = std::sqrt((linear ? 1.0 : 2.0) / static_cast<double>(fan_in));
      for (auto& v : t.storage()) v = stddev * rng.normal();
    }
    params.add(name, std::move(t));
  }
  return params;
}

std::vector<NodeId> Architecture::add_parameter_leaves(Graph& g) const {
  std::vector<NodeId> leaves;
  leaves.reserve(layout_.size());
  for (const auto& [name, shape] : layout_) leaves.push_back(g.leaf(name, shape, ad::LeafKind::Parameter));
  return leaves;
}

ForwardNodes Architecture::forward(Graph& g, NodeId input, const std::vector<NodeId>& params, Mode mode,
                                   const RunningStats& running) const {
  if (params.size() != layout_.size()) throw PreconditionError("parameter node count does not match layout");
  const Shape in_shape = g.shape(input);
  if (in_shape.size() != 4 || in_shape[1] != config_.channels || in_shape[2] != config_.height ||
      in_shape[3] != config_.width) {
    throw ShapeError("model input " + shape_str(in_shape) + " does not match configured input shape");
  }
  auto param = [&](const std::string& name) {
    for (std::size_t i = 0; i < layout_.size(); ++i) {
      if (layout_[i].first == name) return params[i];
    }
    return NodeId{};
  };
  auto stat = [&](const std::string& layer) -> const RunningStat* {
    for (const auto& s : running) {
      if (s.layer == layer) return &s;
    }
    if (mode == Mode::Inference) throw PreconditionError("missing running statistics for layer " + layer);
    return nullptr;
  };
  const double eps = config_.bn_epsilon;

  ForwardNodes out;
  NodeId h = g.conv2d(input, param("stem.conv.weight"), conv3x3(1));
  if (config_.block_style == BlockStyle::PostActivation) {
    const auto* s = stat("stem.bn");
    const std::size_t c = g.shape(h)[1];
    const Tensor zeros({c}, 0.0), ones({c}, 1.0);
    auto bn = batchnorm_graph(g, h, param("stem.bn.gamma"), param("stem.bn.beta"), mode,
                              running_or(s, true, zeros), running_or(s, false, ones), eps, "stem.bn");
    out.taps.push_back(bn.tap);
    h = g.relu(bn.output);
  }
  for (const auto& b : blocks_) {
    BlockInputs p;
    p.conv1 = param(b.prefix + ".conv1.weight");
    p.conv2 = param(b.prefix + ".conv2.weight");
    if (b.projection) p.proj = param(b.prefix + ".proj.weight");
    p.bn1_gamma = param(b.prefix + ".bn1.gamma");
    p.bn1_beta = param(b.prefix + ".bn1.beta");
    p.bn2_gamma = param(b.prefix + ".bn2.gamma");
    p.bn2_beta = param(b.prefix + ".bn2.beta");
    p.bn1_running = stat(b.prefix + ".bn1");
    p.bn2_running = stat(b.prefix + ".bn2");
    h = block_graph(g, h, p, config_.block_style, config_.skip_connections, b.stride, mode, eps, b.prefix, out.taps);
  }
  const Shape hs = g.shape(h);
  NodeId pooled = g.scale(g.sum_to(h, Shape{hs[0], hs[1], 1, 1}), 1.0 / static_cast<double>(hs[2] * hs[3]));
  pooled = g.reshape(pooled, Shape{hs[0], hs[1]});
  const NodeId bias = g.reshape(param("fc.bias"), Shape{1, config_.num_classes});
  out.logits = ad::add_bc(g, g.matmul(pooled, param("fc.weight")), bias);
  return out;
}

BuiltModel build_model(const ModelConfig& config, std::uint64_t seed) {
  Architecture arch(config);
  ModelParams params = arch.initialize(seed);
  return BuiltModel{std::move(arch), std::move(params)};
}

NodeId cross_entropy(Graph& g, NodeId logits, const std::vector<std::size_t>& labels) {
  const Shape s = g.shape(logits);
  if (s.size() != 2 || s[0] != labels.size()) throw ShapeError("cross_entropy: logits must be B x K");
  Tensor onehot(s, 0.0);
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] >= s[1]) throw PreconditionError("label " + std::to_string(labels[b]) + " out of range");
    onehot[b * s[1] + labels[b]] = 1.0;
  }
  const NodeId m = g.stop_gradient(g.max_to(logits, Shape{s[0], 1}));
  const NodeId z = ad::sub_bc(g, logits, m);
  const NodeId lse = g.log(g.sum_to(g.exp(z), Shape{s[0], 1}));
  const NodeId picked = ad::sum_all(g, g.mul(z, g.constant(std::move(onehot))));
  return g.scale(g.sub(ad::sum_all(g, lse), picked), 1.0 / static_cast<double>(s[0]));
}

double cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) throw ShapeError("cross_entropy: logits must be B x K");
  const std::size_t k = logits.dim(1);
  double total = 0.0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] >= k) throw PreconditionError("label " + std::to_string(labels[b]) + " out of range");
    const double* row = logits.data().data() + b * k;
    const double m = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - m);
    total += m + std::log(s) - row[labels[b]];
  }
  return total / static_cast<double>(labels.size());
}

ad::Bindings LossGraph::bind(const ModelParams& params) const {
  if (params.size() != param_leaves.size()) throw PreconditionError("parameter count does not match graph");
  ad::Bindings b;
  for (std::size_t i = 0; i < param_leaves.size(); ++i) b[param_leaves[i]] = params.entries()[i].value;
  return b;
}

LossGraph build_loss_graph(const Architecture& arch, Mode mode, const RunningStats& running, std::size_t batch,
                           const std::vector<std::size_t>& labels) {
  if (labels.size() != batch) throw PreconditionError("labels length differs from batch size");
  LossGraph lg;
  auto& g = lg.graph;
  lg.input = g.leaf("input", arch.config().input_shape(batch));
  lg.param_leaves = arch.add_parameter_leaves(g);
  auto fwd = arch.forward(g, lg.input, lg.param_leaves, mode, running);
  lg.logits = fwd.logits;
  lg.taps = std::move(fwd.taps);
  lg.loss = cross_entropy(g, lg.logits, labels);
  lg.grads = ad::grad(g, lg.loss, lg.param_leaves);
  return lg;
}

LossAndGradients loss_and_gradients(const Architecture& arch, const ModelParams& params, const Batch& batch,
                                    Mode mode, const RunningStats& running) {
  batch.validate(arch.config());
  auto lg = build_loss_graph(arch, mode, running, batch.size(), batch.labels);
  auto bindings = lg.bind(params);
  bindings[lg.input] = batch.images;

  std::vector<NodeId> targets{lg.loss};
  targets.insert(targets.end(), lg.grads.begin(), lg.grads.end());
  for (const auto& t : lg.taps) {
    targets.push_back(t.mean);
    targets.push_back(t.var_biased);
  }
  ad::Executor ex(lg.graph, targets);
  ex.run(bindings);

  LossAndGradients out;
  out.loss = ex.value(lg.loss).item();
  for (std::size_t i = 0; i < lg.grads.size(); ++i) {
    out.gradients.push_back({params.entries()[i].name, ex.value(lg.grads[i])});
  }
  for (const auto& t : lg.taps) {
    out.batch_stats.push_back({t.layer, ex.value(t.mean).reshaped({t.channels}),
                               ex.value(t.var_biased).reshaped({t.channels}), t.n});
  }
  return out;
}

Tensor basic_block_forward(const Tensor& x, const BlockParams& params, BlockStyle style, bool skip, Mode mode,
                           double epsilon) {
  if (x.rank() != 4) throw ShapeError("basic_block_forward expects N x C x H x W");
  Graph g;
  const NodeId in = g.leaf("x", x.shape());
  BlockInputs p;
  p.conv1 = g.constant(params.conv1);
  p.conv2 = g.constant(params.conv2);
  if (params.proj.numel() > 0) p.proj = g.constant(params.proj);
  p.bn1_gamma = g.constant(params.bn1_gamma);
  p.bn1_beta = g.constant(params.bn1_beta);
  p.bn2_gamma = g.constant(params.bn2_gamma);
  p.bn2_beta = g.constant(params.bn2_beta);
  std::vector<BnTap> taps;
  const NodeId out = block_graph(g, in, p, style, skip, params.stride, mode, epsilon, "block", taps);
  return ad::eval1(g, {{in, x}}, out);
}

}  // namespace gia::nn
