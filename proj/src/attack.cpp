#include "gia/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gia/errors.hpp"
#include "gia/metrics.hpp"
#include "gia/rng.hpp"

namespace gia::attack {

using ad::Graph;
using ad::NodeId;

const char* stat_source_name(StatSource s) {
  switch (s) {
    case StatSource::Recovered: return "recovered";
    case StatSource::Proxy: return "proxy";
    case StatSource::Fixed: return "fixed";
    case StatSource::None: return "none";
  }
  return "?";
}

StatSource parse_stat_source(const std::string& name) {
  if (name == "recovered") return StatSource::Recovered;
  if (name == "proxy") return StatSource::Proxy;
  if (name == "fixed") return StatSource::Fixed;
  if (name == "none") return StatSource::None;
  throw PreconditionError("unknown stat source '" + name + "'");
}

void AttackConfig::validate() const {
  if (!(lambda_tv >= 0.0) || !(lambda_bn >= 0.0)) throw PreconditionError("regularizer weights must be >= 0");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw PreconditionError("learning rate must be > 0");
  if (iterations == 0) throw PreconditionError("iterations must be positive");
  if (!(top_fraction > 0.0 && top_fraction <= 1.0)) throw PreconditionError("top fraction must lie in (0, 1]");
  if (stat_source == StatSource::Proxy && aux_batches.empty()) {
    throw PreconditionError("proxy statistics need at least one auxiliary batch");
  }
  if (proxy_selection == ProxySelection::OracleSsim && !oracle_truth) {
    throw PreconditionError("oracle proxy selection needs the ground-truth batch");
  }
}

std::pair<Tensor, Tensor> recover_batch_stats(const Tensor& mean_before, const Tensor& var_before,
                                              const Tensor& mean_after, const Tensor& var_after, double m,
                                              std::size_t n) {
  if (!(m > 0.0 && m <= 1.0)) throw PreconditionError("momentum must lie in (0, 1]");
  if (n < 2) throw PreconditionError("statistic recovery needs n >= 2");
  if (mean_before.shape() != mean_after.shape() || var_before.shape() != var_after.shape() ||
      mean_before.shape() != var_before.shape()) {
    throw ShapeError("running-statistic snapshots differ in shape");
  }
  const double nd = static_cast<double>(n);
  Tensor mu(mean_before.shape()), var(var_before.shape());
  for (std::size_t c = 0; c < mu.numel(); ++c) {
    mu[c] = (mean_after[c] - (1.0 - m) * mean_before[c]) / m;
    var[c] = (nd - 1.0) / (nd * m) * (var_after[c] - (1.0 - m) * var_before[c]);
    if (var[c] < 0.0) {
      throw PreconditionError("recovered variance is negative in channel " + std::to_string(c) +
                              "; the snapshots are not one step apart");
    }
  }
  return {std::move(mu), std::move(var)};
}

StatTargets recover_update_stats(const fed::ClientUpdate& update) {
  if (!update.has_stats()) throw PreconditionError("recovered statistics need shared running-statistic snapshots");
  if (update.mode != nn::Mode::Training) {
    throw PreconditionError("recovered statistics need a training-mode update");
  }
  const auto& before = *update.stats_before;
  const auto& after = *update.stats_after;
  if (before.size() != after.size() || before.size() != update.n_per_channel.size()) {
    throw PreconditionError("snapshots and layer counts disagree");
  }
  StatTargets out;
  for (std::size_t l = 0; l < before.size(); ++l) {
    if (before[l].layer != after[l].layer || before[l].layer != update.n_per_channel[l].first) {
      throw PreconditionError("snapshot layer order mismatch at " + before[l].layer);
    }
    const std::size_t n = update.n_per_channel[l].second;
    auto [mu, var] = recover_batch_stats(before[l].mean, before[l].var, after[l].mean, after[l].var,
                                         update.momentum, n);
    out.push_back({before[l].layer, std::move(mu), std::move(var), n});
  }
  return out;
}

namespace {

void check_layers(const std::vector<std::string>& have, const StatTargets& targets) {
  if (have.size() != targets.size()) {
    throw PreconditionError("R_BN layer sets differ: " + std::to_string(have.size()) + " candidate layers, " +
                            std::to_string(targets.size()) + " targets");
  }
  for (std::size_t l = 0; l < have.size(); ++l) {
    if (have[l] != targets[l].layer) {
      throw PreconditionError("R_BN layer mismatch: '" + have[l] + "' vs '" + targets[l].layer + "'");
    }
  }
}

}  // namespace

NodeId r_bn(Graph& g, const std::vector<nn::BnTap>& taps, const StatTargets& targets) {
  std::vector<std::string> names;
  for (const auto& t : taps) names.push_back(t.layer);
  check_layers(names, targets);
  NodeId total = g.scalar_constant(0.0);
  for (std::size_t l = 0; l < taps.size(); ++l) {
    const Shape s = g.shape(taps[l].mean);
    if (targets[l].mean.numel() != taps[l].channels || targets[l].var_biased.numel() != taps[l].channels) {
      throw ShapeError("R_BN target channel count differs at layer " + taps[l].layer);
    }
    auto dm = g.sub(taps[l].mean, g.constant(targets[l].mean.reshaped(s)));
    auto dv = g.sub(taps[l].var_biased, g.constant(targets[l].var_biased.reshaped(s)));
    total = g.add(total, g.add(ad::sum_all(g, g.square(dm)), ad::sum_all(g, g.square(dv))));
  }
  return total;
}

double r_bn(const nn::BatchStats& candidate, const StatTargets& targets) {
  std::vector<std::string> names;
  for (const auto& c : candidate) names.push_back(c.layer);
  check_layers(names, targets);
  double total = 0.0;
  for (std::size_t l = 0; l < candidate.size(); ++l) {
    if (candidate[l].mean.shape() != targets[l].mean.shape() ||
        candidate[l].var_biased.shape() != targets[l].var_biased.shape()) {
      throw ShapeError("R_BN channel count differs at layer " + candidate[l].layer);
    }
    for (std::size_t c = 0; c < candidate[l].mean.numel(); ++c) {
      const double dm = candidate[l].mean[c] - targets[l].mean[c];
      const double dv = candidate[l].var_biased[c] - targets[l].var_biased[c];
      total += dm * dm + dv * dv;
    }
  }
  return total;
}

// sqrt(delta) is subtracted per term so that a flat image scores exactly zero;
// the gradient is unaffected.
NodeId total_variation(Graph& g, NodeId x) {
  const Shape s = g.shape(x);
  if (s.size() != 4 || s[2] < 2 || s[3] < 2) throw ShapeError("total variation needs N x C x H x W with H, W >= 2");
  const Shape inner{s[0], s[1], s[2] - 1, s[3] - 1};
  auto base = g.slice(x, {0, 0, 0, 0}, inner);
  auto down = g.sub(g.slice(x, {0, 0, 1, 0}, inner), base);
  auto right = g.sub(g.slice(x, {0, 0, 0, 1}, inner), base);
  auto mag = g.sqrt(g.add_scalar(g.add(g.square(down), g.square(right)), kTvDelta));
  return ad::sum_all(g, g.add_scalar(mag, -std::sqrt(kTvDelta)));
}

double total_variation(const Tensor& x) {
  if (x.rank() != 4 || x.dim(2) < 2 || x.dim(3) < 2) {
    throw ShapeError("total variation needs N x C x H x W with H, W >= 2");
  }
  double total = 0.0;
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t c = 0; c < x.dim(1); ++c)
      for (std::size_t i = 0; i + 1 < x.dim(2); ++i)
        for (std::size_t j = 0; j + 1 < x.dim(3); ++j) {
          const double d = x.at(n, c, i + 1, j) - x.at(n, c, i, j);
          const double r = x.at(n, c, i, j + 1) - x.at(n, c, i, j);
          total += std::sqrt(d * d + r * r + kTvDelta) - std::sqrt(kTvDelta);
        }
  return total;
}

namespace {

void check_gradient_sets(const GradientSet& g, const GradientSet& g_star, const Mask* mask) {
  if (g.size() != g_star.size()) throw PreconditionError("gradient sets differ in size");
  for (std::size_t p = 0; p < g.size(); ++p) {
    if (g[p].name != g_star[p].name || g[p].value.shape() != g_star[p].value.shape()) {
      throw ShapeError("gradient entry '" + g[p].name + "' does not match '" + g_star[p].name + "'");
    }
  }
  if (mask != nullptr) {
    if (mask->size() != g_star.size()) throw PreconditionError("mask covers a different parameter set");
    for (std::size_t p = 0; p < g_star.size(); ++p) {
      if ((*mask)[p].shape() != g_star[p].value.shape()) throw ShapeError("mask shape differs for " + g_star[p].name);
    }
  }
}

Tensor masked(const Tensor& t, const Mask* mask, std::size_t p) {
  if (mask == nullptr) return t;
  Tensor out = t;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= (*mask)[p][i];
  return out;
}

}  // namespace

NodeId cosine_discrepancy(Graph& g, const std::vector<NodeId>& grads, const GradientSet& g_star, const Mask* mask) {
  if (grads.size() != g_star.size()) throw PreconditionError("gradient sets differ in size");
  if (mask != nullptr && mask->size() != g_star.size()) throw PreconditionError("mask covers a different parameter set");
  double star_sq = 0.0;
  NodeId dot = g.scalar_constant(0.0), norm_sq = g.scalar_constant(0.0);
  for (std::size_t p = 0; p < grads.size(); ++p) {
    if (g.shape(grads[p]) != g_star[p].value.shape()) throw ShapeError("gradient shape differs for " + g_star[p].name);
    Tensor target = masked(g_star[p].value, mask, p);
    for (double v : target.storage()) star_sq += v * v;
    NodeId gp = mask != nullptr ? g.mul(grads[p], g.constant((*mask)[p])) : grads[p];
    dot = g.add(dot, ad::sum_all(g, g.mul(gp, g.constant(std::move(target)))));
    norm_sq = g.add(norm_sq, ad::sum_all(g, g.square(gp)));
  }
  if (star_sq == 0.0) throw PreconditionError("observed gradient is zero; cosine discrepancy is undefined");
  auto cos = g.scale(g.div(dot, g.sqrt(norm_sq)), 1.0 / std::sqrt(star_sq));
  return g.add_scalar(g.neg(cos), 1.0);
}

double cosine_discrepancy(const GradientSet& g, const GradientSet& g_star, const Mask* mask) {
  check_gradient_sets(g, g_star, mask);
  double dot = 0.0, gg = 0.0, ss = 0.0;
  for (std::size_t p = 0; p < g.size(); ++p) {
    for (std::size_t i = 0; i < g[p].value.numel(); ++i) {
      const double w = mask != nullptr ? (*mask)[p][i] : 1.0;
      const double a = g[p].value[i] * w, b = g_star[p].value[i] * w;
      dot += a * b;
      gg += a * a;
      ss += b * b;
    }
  }
  if (gg == 0.0 && ss == 0.0) throw PreconditionError("both gradient vectors are zero");
  if (gg == 0.0 || ss == 0.0) return 1.0;
  return 1.0 - dot / (std::sqrt(gg) * std::sqrt(ss));
}

Mask top_change_mask(const GradientSet& g_star, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw PreconditionError("top fraction must lie in (0, 1]");
  struct Coord {
    double mag;
    std::uint32_t param;
    std::size_t index;
  };
  std::vector<Coord> coords;
  for (std::size_t p = 0; p < g_star.size(); ++p)
    for (std::size_t i = 0; i < g_star[p].value.numel(); ++i)
      coords.push_back({std::abs(g_star[p].value[i]), static_cast<std::uint32_t>(p), i});
  Mask mask;
  for (const auto& e : g_star) mask.emplace_back(e.value.shape(), 0.0);
  if (coords.empty()) return mask;
  const auto total = coords.size();
  const auto keep = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(total))),
                                            1, total);
  auto before = [](const Coord& a, const Coord& b) {
    if (a.mag != b.mag) return a.mag > b.mag;
    if (a.param != b.param) return a.param < b.param;
    return a.index < b.index;
  };
  // with a strict total order, everything before the keep-th element ranks ahead of it
  std::nth_element(coords.begin(), coords.begin() + static_cast<std::ptrdiff_t>(keep - 1), coords.end(), before);
  for (std::size_t k = 0; k < keep; ++k) mask[coords[k].param][coords[k].index] = 1.0;
  return mask;
}

std::vector<StatTargets> probe_proxy_stats(const nn::Architecture& arch, const nn::ModelParams& params,
                                           const std::vector<nn::Batch>& aux_batches) {
  if (aux_batches.empty()) throw PreconditionError("no auxiliary batches to probe");
  std::vector<StatTargets> out;
  const auto running = arch.initial_running_stats();
  for (const auto& batch : aux_batches) {
    batch.validate(arch.config());
    Graph g;
    auto x = g.leaf("input", batch.images.shape());
    auto leaves = arch.add_parameter_leaves(g);
    auto fwd = arch.forward(g, x, leaves, nn::Mode::Training, running);
    ad::Bindings b;
    b[x] = batch.images;
    for (std::size_t i = 0; i < leaves.size(); ++i) b[leaves[i]] = params.entries()[i].value;
    std::vector<NodeId> targets;
    for (const auto& t : fwd.taps) {
      targets.push_back(t.mean);
      targets.push_back(t.var_biased);
    }
    auto vals = ad::eval(g, b, targets);
    StatTargets stats;
    for (std::size_t l = 0; l < fwd.taps.size(); ++l) {
      const auto& t = fwd.taps[l];
      stats.push_back({t.layer, vals[2 * l].reshaped({t.channels}), vals[2 * l + 1].reshaped({t.channels}), t.n});
    }
    out.push_back(std::move(stats));
  }
  return out;
}

Tensor median_smooth(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("median_smooth expects N x C x H x W");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out(x.shape());
  double win[9];
  for (std::size_t p = 0; p < planes; ++p) {
    const double* in = x.data().data() + p * h * w;
    double* o = out.data().data() + p * h * w;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        std::size_t k = 0;
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj) {
            const auto ii = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(i) + di, 0, static_cast<long>(h) - 1));
            const auto jj = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(j) + dj, 0, static_cast<long>(w) - 1));
            win[k++] = in[ii * w + jj];
          }
        std::nth_element(win, win + 4, win + 9);
        o[i * w + j] = win[4];
      }
  }
  return out;
}

Tensor initial_candidate(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor x(shape);
  for (auto& v : x.storage()) v = rng.normal();
  return x;
}

namespace {

AttackResult attack_once(const fed::ClientUpdate& update, const AttackModel& model, const AttackConfig& config,
                         const std::optional<StatTargets>& targets, const ProgressHook& hook) {
  const auto& arch = *model.arch;
  auto lg = nn::build_loss_graph(arch, update.mode, *model.running, update.batch_size, update.labels);
  Graph& g = lg.graph;

  Mask mask;
  if (config.top_fraction < 1.0) mask = top_change_mask(update.gradients, config.top_fraction);
  const NodeId disc = cosine_discrepancy(g, lg.grads, update.gradients, mask.empty() ? nullptr : &mask);
  NodeId total = disc;
  if (config.lambda_tv > 0.0) total = g.add(total, g.scale(total_variation(g, lg.input), config.lambda_tv));
  if (targets && config.lambda_bn > 0.0) total = g.add(total, g.scale(r_bn(g, lg.taps, *targets), config.lambda_bn));
  const NodeId dx = ad::grad1(g, total, lg.input);

  ad::Executor ex(g, {total, disc, dx}, {lg.input});
  auto bindings = lg.bind(*model.params);
  const Shape shape = g.shape(lg.input);
  Tensor& x = bindings[lg.input];
  x = initial_candidate(shape, config.init_seed);

  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<double> m(x.numel(), 0.0), v(x.numel(), 0.0);
  AttackResult result;
  result.loss_trace.reserve(config.iterations);
  result.discrepancy_trace.reserve(config.iterations);
  double b1t = 1.0, b2t = 1.0;
  for (std::size_t it = 0; it < config.iterations; ++it) {
    try {
      ex.run(bindings);
    } catch (const NonFiniteError& e) {
      throw AttackDiverged("attack diverged at iteration " + std::to_string(it) + ": " + e.what());
    }
    result.loss_trace.push_back(ex.value(total).item());
    result.discrepancy_trace.push_back(ex.value(disc).item());
    const Tensor& grad = ex.value(dx);
    b1t *= beta1;
    b2t *= beta2;
    for (std::size_t i = 0; i < x.numel(); ++i) {
      m[i] = beta1 * m[i] + (1 - beta1) * grad[i];
      v[i] = beta2 * v[i] + (1 - beta2) * grad[i] * grad[i];
      const double mhat = m[i] / (1 - b1t), vhat = v[i] / (1 - b2t);
      x[i] -= config.learning_rate * mhat / (std::sqrt(vhat) + eps);
    }
    if (!x.all_finite()) throw AttackDiverged("attack diverged at iteration " + std::to_string(it));
    if (config.smoothing && (it + 1) % kSmoothingInterval == 0) x = median_smooth(x);
    if (hook && !hook(it, result.discrepancy_trace.back())) {
      throw AttackAborted("attack stopped at iteration " + std::to_string(it));
    }
  }
  result.reconstruction = model.normalization.clamp(x);
  result.final_discrepancy = result.discrepancy_trace.back();
  if (targets) result.stats_used = *targets;
  return result;
}

}  // namespace

AttackResult run_attack(const fed::ClientUpdate& update, const AttackModel& model, const AttackConfig& config,
                        const ProgressHook& hook) {
  if (model.arch == nullptr || model.params == nullptr || model.running == nullptr) {
    throw PreconditionError("attack model is incomplete");
  }
  config.validate();
  update.validate(*model.params);
  model.normalization.validate();
  if (model.normalization.channels() != model.arch->config().channels) {
    throw PreconditionError("normalization channel count differs from the model input");
  }

  switch (config.stat_source) {
    case StatSource::None: return attack_once(update, model, config, std::nullopt, hook);
    case StatSource::Recovered: return attack_once(update, model, config, recover_update_stats(update), hook);
    case StatSource::Fixed: {
      StatTargets fixed;
      for (std::size_t l = 0; l < model.running->size(); ++l) {
        const auto& r = (*model.running)[l];
        fixed.push_back({r.layer, r.mean, r.var, 0});
      }
      return attack_once(update, model, config, fixed, hook);
    }
    case StatSource::Proxy: break;
  }

  const auto candidates = probe_proxy_stats(*model.arch, *model.params, config.aux_batches);
  std::optional<AttackResult> best;
  double best_score = 0.0;
  std::vector<double> discrepancies;
  std::string last_error;
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    AttackResult r;
    try {
      r = attack_once(update, model, config, candidates[k], hook);
    } catch (const AttackDiverged& e) {
      discrepancies.push_back(std::numeric_limits<double>::quiet_NaN());
      last_error = e.what();
      continue;
    }
    discrepancies.push_back(r.final_discrepancy);
    double score = -r.final_discrepancy;
    if (config.proxy_selection == ProxySelection::OracleSsim) {
      score = metrics::best_assignment_ssim(model.normalization.denormalize(r.reconstruction),
                                            model.normalization.denormalize(config.oracle_truth->images))
                  .mean_ssim;
    }
    if (!best || score > best_score) {
      best_score = score;
      r.proxy_candidate = k;
      best = std::move(r);
    }
  }
  if (!best) throw AttackDiverged("every proxy candidate diverged; last: " + last_error);
  best->proxy_candidate_discrepancy = std::move(discrepancies);
  return std::move(*best);
}

}  // namespace gia::attack
