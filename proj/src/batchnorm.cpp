#include "gia/batchnorm.hpp"

#include <cmath>

#include "gia/errors.hpp"

namespace gia::nn {
namespace {

struct Layout {
  std::size_t batch, channels, plane;
};

Layout layout_of(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("batchnorm expects N x C x H x W, got " + shape_str(x.shape()));
  return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
}

void require_channels(const Tensor& t, std::size_t c, const char* what) {
  if (t.shape() != Shape{c}) {
    throw ShapeError(std::string("batchnorm ") + what + " has shape " + shape_str(t.shape()) + ", expected [" +
                     std::to_string(c) + "]");
  }
}

}  // namespace

const char* mode_name(Mode mode) { return mode == Mode::Training ? "training" : "inference"; }

Mode parse_mode(const std::string& name) {
  if (name == "training" || name == "train") return Mode::Training;
  if (name == "inference" || name == "eval") return Mode::Inference;
  throw PreconditionError("unknown mode '" + name + "'");
}

BNState BNState::initial(std::size_t channels, Mode mode, double momentum, double epsilon) {
  BNState s;
  s.gamma = Tensor({channels}, 1.0);
  s.beta = Tensor({channels}, 0.0);
  s.running_mean = Tensor({channels}, 0.0);
  s.running_var = Tensor({channels}, 1.0);
  s.momentum = momentum;
  s.epsilon = epsilon;
  s.mode = mode;
  return s;
}

Tensor unbiased_from_biased(const Tensor& biased, std::size_t n) {
  if (n < 2) throw PreconditionError("unbiased variance needs n >= 2");
  Tensor out = biased;
  const double f = static_cast<double>(n) / static_cast<double>(n - 1);
  for (auto& v : out.storage()) v *= f;
  return out;
}

BNForwardResult batchnorm_forward(const Tensor& x, const BNState& state) {
  const auto [batch, channels, plane] = layout_of(x);
  require_channels(state.gamma, channels, "gamma");
  require_channels(state.beta, channels, "beta");
  require_channels(state.running_mean, channels, "running_mean");
  require_channels(state.running_var, channels, "running_var");
  const std::size_t n = batch * plane;
  if (state.mode == Mode::Training && n < 2) {
    throw PreconditionError("training-mode batchnorm needs at least 2 elements per channel");
  }

  BNForwardResult r;
  r.cache.n = n;
  r.cache.batch_mean = Tensor({channels});
  r.cache.batch_var_biased = Tensor({channels});
  r.cache.sigma = Tensor({channels});
  r.cache.normalized = Tensor(x.shape());
  r.y = Tensor(x.shape());
  r.updated_state = state;

  for (std::size_t c = 0; c < channels; ++c) {
    double mean = 0.0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < plane; ++i) mean += x[(b * channels + c) * plane + i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = x[(b * channels + c) * plane + i] - mean;
        var += d * d;
      }
    var /= static_cast<double>(n);
    r.cache.batch_mean[c] = mean;
    r.cache.batch_var_biased[c] = var;

    const bool training = state.mode == Mode::Training;
    const double use_mean = training ? mean : state.running_mean[c];
    const double use_var = training ? var : state.running_var[c];
    const double sigma = std::sqrt(use_var + state.epsilon);
    r.cache.sigma[c] = sigma;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t k = (b * channels + c) * plane + i;
        const double xhat = (x[k] - use_mean) / sigma;
        r.cache.normalized[k] = xhat;
        r.y[k] = state.gamma[c] * xhat + state.beta[c];
      }
    if (training) {
      const double m = state.momentum;
      const double unbiased = var * static_cast<double>(n) / static_cast<double>(n - 1);
      r.updated_state.running_mean[c] = (1.0 - m) * state.running_mean[c] + m * mean;
      r.updated_state.running_var[c] = (1.0 - m) * state.running_var[c] + m * unbiased;
    }
  }
  return r;
}

Tensor bn_input_grad_inference(const Tensor& g_xhat, const Tensor& sigma) {
  const auto [batch, channels, plane] = layout_of(g_xhat);
  require_channels(sigma, channels, "sigma");
  Tensor out(g_xhat.shape());
  for (std::size_t c = 0; c < channels; ++c) {
    if (!(sigma[c] > 0.0)) throw PreconditionError("batchnorm sigma must be positive");
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t k = (b * channels + c) * plane + i;
        out[k] = g_xhat[k] / sigma[c];
      }
  }
  return out;
}

Tensor bn_input_grad_training(const Tensor& g_xhat, const BNForwardCache& cache) {
  const auto [batch, channels, plane] = layout_of(g_xhat);
  if (cache.normalized.shape() != g_xhat.shape()) throw ShapeError("batchnorm cache does not match gradient");
  require_channels(cache.sigma, channels, "sigma");
  const std::size_t n = batch * plane;
  if (n < 2) throw PreconditionError("training-mode batchnorm gradient needs n >= 2");
  Tensor out(g_xhat.shape());
  const Tensor& xhat = cache.normalized;
  for (std::size_t c = 0; c < channels; ++c) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t k = (b * channels + c) * plane + i;
        sum_g += g_xhat[k];
        sum_gx += g_xhat[k] * xhat[k];
      }
    const double mean_g = sum_g / static_cast<double>(n);
    const double mean_gx = sum_gx / static_cast<double>(n);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t k = (b * channels + c) * plane + i;
        out[k] = (g_xhat[k] - xhat[k] * mean_gx - mean_g) / cache.sigma[c];
      }
  }
  return out;
}

BnNodes batchnorm_graph(ad::Graph& g, ad::NodeId x, ad::NodeId gamma, ad::NodeId beta, Mode mode,
                        const Tensor& running_mean, const Tensor& running_var, double epsilon,
                        const std::string& layer) {
  const Shape xs = g.shape(x);
  if (xs.size() != 4) throw ShapeError("batchnorm expects N x C x H x W");
  const std::size_t c = xs[1];
  const Shape channel_shape{1, c, 1, 1};
  if (g.shape(gamma) != Shape{c} || g.shape(beta) != Shape{c}) {
    throw ShapeError("batchnorm parameters do not match " + std::to_string(c) + " channels in layer " + layer);
  }

  BnNodes out;
  out.tap.layer = layer;
  out.tap.n = xs[0] * xs[2] * xs[3];
  out.tap.channels = c;
  out.tap.mean = ad::channel_mean(g, x);
  out.tap.var_biased = ad::channel_mean(g, g.square(ad::sub_bc(g, x, out.tap.mean)));

  ad::NodeId xhat;
  if (mode == Mode::Training) {
    if (out.tap.n < 2) throw PreconditionError("training-mode batchnorm needs at least 2 elements per channel");
    xhat = g.batchnorm_train(x, epsilon);
  } else {
    Tensor inv_sigma({1, c, 1, 1});
    for (std::size_t k = 0; k < c; ++k) inv_sigma[k] = 1.0 / std::sqrt(running_var[k] + epsilon);
    const auto mu = g.constant(running_mean.reshaped(channel_shape));
    xhat = ad::mul_bc(g, ad::sub_bc(g, x, mu), g.constant(std::move(inv_sigma)));
  }
  const auto ga = g.reshape(gamma, channel_shape);
  const auto be = g.reshape(beta, channel_shape);
  out.output = ad::add_bc(g, ad::mul_bc(g, xhat, ga), be);
  return out;
}

}  // namespace gia::nn
