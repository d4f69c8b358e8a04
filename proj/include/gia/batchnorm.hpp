#pragma once

#include <cstddef>
#include <string>

#include "gia/autodiff.hpp"
#include "gia/tensor.hpp"

namespace gia::nn {

enum class Mode { Training, Inference };

const char* mode_name(Mode mode);
Mode parse_mode(const std::string& name);

// Per-layer BatchNorm parameters and running statistics. Channel vectors have
// shape [C]; running_var uses the unbiased (n - 1) convention.
struct BNState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;
  Mode mode = Mode::Training;

  static BNState initial(std::size_t channels, Mode mode, double momentum = 0.1, double epsilon = 1e-5);
};

struct BNForwardCache {
  Tensor batch_mean;        // [C]
  Tensor batch_var_biased;  // [C], divisor n
  Tensor sigma;             // [C], sqrt(var + eps) of whichever statistics normalized x
  Tensor normalized;        // x-hat, same shape as x
  std::size_t n = 0;        // elements per channel, B*H*W
};

struct BNForwardResult {
  Tensor y;
  BNForwardCache cache;
  BNState updated_state;
};

// Direct (non-graph) forward over an N x C x H x W tensor. In training mode the
// running statistics advance by the momentum rule:
//   running <- (1 - m) * running + m * batch   (variance term unbiased)
BNForwardResult batchnorm_forward(const Tensor& x, const BNState& state);

// Input gradient of the normalization step when statistics are fixed:
// dL/dx = dL/dxhat / sigma, with sigma = sqrt(running_var + eps) per channel.
Tensor bn_input_grad_inference(const Tensor& g_xhat, const Tensor& sigma);

// Input gradient when statistics come from the batch itself:
// dL/dx = (g - xhat * mean(g * xhat) - mean(g)) / sigma, means over the n elements of a channel.
Tensor bn_input_grad_training(const Tensor& g_xhat, const BNForwardCache& cache);

// Unbiased-variance conversion used by the running statistics.
Tensor unbiased_from_biased(const Tensor& biased, std::size_t n);

// Graph-level BatchNorm. `mean` and `var_biased` are the batch statistics of
// the layer input as differentiable nodes (collected in both modes).
struct BnTap {
  std::string layer;
  ad::NodeId mean;
  ad::NodeId var_biased;
  std::size_t n = 0;
  std::size_t channels = 0;
};

struct BnNodes {
  ad::NodeId output;
  BnTap tap;
};

// Training mode normalizes with a BatchNormTrain node (whose backward is the
// batch-coupled rule above); inference mode uses constant running statistics.
BnNodes batchnorm_graph(ad::Graph& g, ad::NodeId x, ad::NodeId gamma, ad::NodeId beta, Mode mode,
                        const Tensor& running_mean, const Tensor& running_var, double epsilon,
                        const std::string& layer);

}  // namespace gia::nn
