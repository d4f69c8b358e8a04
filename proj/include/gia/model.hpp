#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gia/autodiff.hpp"
#include "gia/batchnorm.hpp"
#include "gia/tensor.hpp"

namespace gia::nn {

enum class BlockStyle { PreActivation, PostActivation };

const char* block_style_name(BlockStyle style);

// Residual classifier family: stem conv -> depth basic blocks -> global average
// pool -> linear. Channel count of stage s is base_width * width_multiplier * 2^s.
struct ModelConfig {
  BlockStyle block_style = BlockStyle::PreActivation;
  std::size_t depth = 1;
  std::size_t width_multiplier = 1;
  bool skip_connections = true;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 10;
  std::size_t base_width = 8;
  std::size_t stage_depth = 0;  // blocks per stage, 0 = a single stage
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;

  void validate() const;
  Shape input_shape(std::size_t batch) const { return Shape{batch, channels, height, width}; }
};

struct NamedTensor {
  std::string name;
  Tensor value;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

// Ordered, uniquely named parameter tensors.
class ModelParams {
 public:
  void add(std::string name, Tensor value);
  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::vector<NamedTensor>& entries() { return entries_; }
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  std::optional<std::size_t> index_of(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }
  std::size_t total_elements() const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;

 private:
  std::vector<NamedTensor> entries_;
};

// Running statistics of one BatchNorm layer; `var` is unbiased.
struct RunningStat {
  std::string layer;
  Tensor mean;
  Tensor var;

  friend bool operator==(const RunningStat&, const RunningStat&) = default;
};
using RunningStats = std::vector<RunningStat>;

// Batch statistics captured at one BatchNorm layer; `var_biased` uses divisor n.
struct BatchStat {
  std::string layer;
  Tensor mean;
  Tensor var_biased;
  std::size_t n = 0;
};
using BatchStats = std::vector<BatchStat>;

struct Batch {
  Tensor images;  // B x C x H x W, normalized space
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  void validate(const ModelConfig& config) const;
};

struct ForwardNodes {
  ad::NodeId logits;
  std::vector<BnTap> taps;
};

// Layer plan for a configuration; holds no parameter values.
class Architecture {
 public:
  explicit Architecture(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  // Parameter names and shapes in canonical order.
  const std::vector<std::pair<std::string, Shape>>& parameter_layout() const { return layout_; }
  const std::vector<std::pair<std::string, std::size_t>>& bn_layers() const { return bn_layers_; }
  std::vector<std::size_t> block_channels() const;

  RunningStats initial_running_stats() const;
  ModelParams initialize(std::uint64_t seed) const;

  // Appends one parameter leaf per layout entry (canonical order).
  std::vector<ad::NodeId> add_parameter_leaves(ad::Graph& g) const;
  ForwardNodes forward(ad::Graph& g, ad::NodeId input, const std::vector<ad::NodeId>& params, Mode mode,
                       const RunningStats& running) const;

 private:
  struct Block {
    std::string prefix;
    std::size_t in = 0, out = 0, stride = 1;
    bool projection = false;
  };

  ModelConfig config_;
  std::vector<Block> blocks_;
  std::vector<std::pair<std::string, Shape>> layout_;
  std::vector<std::pair<std::string, std::size_t>> bn_layers_;
};

struct BuiltModel {
  Architecture architecture;
  ModelParams params;
};

// Kaiming fan-in initialization for conv/linear weights, gamma = 1, beta = 0,
// zero linear bias. Deterministic in `seed`.
BuiltModel build_model(const ModelConfig& config, std::uint64_t seed);

// Softmax cross-entropy averaged over the batch, stabilized by max subtraction.
ad::NodeId cross_entropy(ad::Graph& g, ad::NodeId logits, const std::vector<std::size_t>& labels);
double cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels);

// Loss and parameter-gradient graph over a data leaf of the batch shape.
struct LossGraph {
  ad::Graph graph;
  ad::NodeId input;
  std::vector<ad::NodeId> param_leaves;  // ModelParams order
  ad::NodeId logits;
  ad::NodeId loss;
  std::vector<ad::NodeId> grads;  // ModelParams order, differentiable nodes
  std::vector<BnTap> taps;

  ad::Bindings bind(const ModelParams& params) const;
};

LossGraph build_loss_graph(const Architecture& arch, Mode mode, const RunningStats& running, std::size_t batch,
                           const std::vector<std::size_t>& labels);

struct LossAndGradients {
  double loss = 0.0;
  std::vector<NamedTensor> gradients;
  BatchStats batch_stats;
};

LossAndGradients loss_and_gradients(const Architecture& arch, const ModelParams& params, const Batch& batch,
                                    Mode mode, const RunningStats& running);

// One residual block in isolation (used for verification). `proj` is empty
// when the block has no projection shortcut.
struct BlockParams {
  Tensor conv1, conv2, proj;
  Tensor bn1_gamma, bn1_beta, bn2_gamma, bn2_beta;
  std::size_t stride = 1;
};

Tensor basic_block_forward(const Tensor& x, const BlockParams& params, BlockStyle style, bool skip,
                           Mode mode = Mode::Training, double epsilon = 1e-5);

}  // namespace gia::nn
