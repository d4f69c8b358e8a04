#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gia/autodiff.hpp"
#include "gia/errors.hpp"
#include "gia/fed_client.hpp"
#include "gia/image.hpp"
#include "gia/model.hpp"

namespace gia::attack {

enum class StatSource { Recovered, Proxy, Fixed, None };
const char* stat_source_name(StatSource s);
StatSource parse_stat_source(const std::string& name);

// How the proxy attack picks among auxiliary candidates. OracleSsim peeks at
// the ground truth and exists only for research comparisons.
enum class ProxySelection { Discrepancy, OracleSsim };

constexpr std::size_t kSmoothingInterval = 500;

struct AttackConfig {
  double lambda_tv = 1e-4;
  double lambda_bn = 1e-2;
  double learning_rate = 0.1;
  std::size_t iterations = 500;
  double top_fraction = 1.0;  // 1 compares all weights
  bool smoothing = false;
  StatSource stat_source = StatSource::None;
  std::uint64_t init_seed = 0;
  std::vector<nn::Batch> aux_batches;  // proxy candidates
  ProxySelection proxy_selection = ProxySelection::Discrepancy;
  std::optional<nn::Batch> oracle_truth;  // OracleSsim only

  void validate() const;
};

// Per-layer statistic targets for R_BN (`var_biased` carries whichever
// variance the source provides).
using StatTargets = nn::BatchStats;

struct AttackResult {
  Tensor reconstruction;  // normalized space, clamped to the image of [0,1]
  double final_discrepancy = 0.0;
  std::vector<double> loss_trace;         // total objective per iteration
  std::vector<double> discrepancy_trace;  // cosine term per iteration
  std::optional<std::vector<double>> ssim_per_image;
  StatTargets stats_used;
  std::optional<std::size_t> proxy_candidate;
  std::vector<double> proxy_candidate_discrepancy;
};

// Called after each iteration with (iteration, discrepancy); returning false
// stops the run (AttackAborted).
using ProgressHook = std::function<bool(std::size_t, double)>;

class AttackDiverged : public RuntimeFailure {
 public:
  explicit AttackDiverged(const std::string& what) : RuntimeFailure(what) {}
};

class AttackAborted : public RuntimeFailure {
 public:
  explicit AttackAborted(const std::string& what) : RuntimeFailure(what) {}
};

// Biased batch statistics from running-statistic snapshots around one step.
// A negative recovered variance throws PreconditionError (inconsistent snapshots).
std::pair<Tensor, Tensor> recover_batch_stats(const Tensor& mean_before, const Tensor& var_before,
                                              const Tensor& mean_after, const Tensor& var_after, double m,
                                              std::size_t n);
StatTargets recover_update_stats(const fed::ClientUpdate& update);

// Graph forms (differentiable in the candidate) and their direct counterparts.
ad::NodeId r_bn(ad::Graph& g, const std::vector<nn::BnTap>& taps, const StatTargets& targets);
double r_bn(const nn::BatchStats& candidate, const StatTargets& targets);

constexpr double kTvDelta = 1e-12;
ad::NodeId total_variation(ad::Graph& g, ad::NodeId x);
double total_variation(const Tensor& x);

using GradientSet = std::vector<nn::NamedTensor>;
using Mask = std::vector<Tensor>;  // 0/1 per coordinate, GradientSet order

ad::NodeId cosine_discrepancy(ad::Graph& g, const std::vector<ad::NodeId>& grads, const GradientSet& g_star,
                              const Mask* mask = nullptr);
double cosine_discrepancy(const GradientSet& g, const GradientSet& g_star, const Mask* mask = nullptr);

Mask top_change_mask(const GradientSet& g_star, double fraction);

std::vector<StatTargets> probe_proxy_stats(const nn::Architecture& arch, const nn::ModelParams& params,
                                           const std::vector<nn::Batch>& aux_batches);

// 3x3 per-channel median with edge replication.
Tensor median_smooth(const Tensor& x);

struct AttackModel {
  const nn::Architecture* arch = nullptr;
  const nn::ModelParams* params = nullptr;
  const nn::RunningStats* running = nullptr;  // statistics the client normalized with in inference mode
  Normalization normalization;
};

AttackResult run_attack(const fed::ClientUpdate& update, const AttackModel& model, const AttackConfig& config,
                        const ProgressHook& hook = {});

// Seeded standard-normal candidate batch in normalized space.
Tensor initial_candidate(const Shape& shape, std::uint64_t seed);

}  // namespace gia::attack
