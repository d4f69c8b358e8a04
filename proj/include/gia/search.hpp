#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gia/attack.hpp"
#include "gia/errors.hpp"
#include "gia/fed_client.hpp"
#include "gia/rng.hpp"

namespace gia::search {

struct LogRange {
  double lo = 1.0, hi = 1.0;
};

struct SearchSpace {
  LogRange lambda_bn{1e-4, 1e1};
  LogRange lambda_tv{1e-6, 1e0};
  LogRange learning_rate{1e-3, 1e0};
  std::vector<double> grad_compare{1.0, 0.5, 0.25};  // top fractions, 1 = all weights
  std::vector<bool> smoothing{true, false};
  std::size_t batch_pool = 5;

  void validate() const;
};

struct TrialSample {
  double lambda_bn = 0.0, lambda_tv = 0.0, learning_rate = 0.0, top_fraction = 1.0;
  bool smoothing = false;
  std::size_t batch_id = 0;

  friend bool operator==(const TrialSample&, const TrialSample&) = default;
};

// Draws fields in declaration order: lambda_bn, lambda_tv, learning_rate,
// grad_compare, smoothing, batch.
TrialSample sample_trial(const SearchSpace& space, Rng& rng);
double sample_log_uniform(const LogRange& range, Rng& rng);

struct TrialRecord {
  std::size_t index = 0;
  TrialSample sample;
  std::uint64_t attack_seed = 0;
  std::optional<double> ssim;  // absent for diverged or pruned trials
  double final_discrepancy = 0.0;
  double wall_seconds = 0.0;
  bool diverged = false;
  bool pruned = false;
  std::optional<std::size_t> proxy_candidate;
  std::string note;

  bool scored() const { return ssim.has_value(); }
};

// Equality of everything except wall time.
bool same_outcome(const TrialRecord& a, const TrialRecord& b);

std::string record_json(const TrialRecord& r);

// Trial t uses seed derive_seed(master, t); the hyperparameter draw uses
// Rng(seed) and the attack initialization mix_seed(seed).
std::uint64_t trial_seed(std::uint64_t master, std::size_t index);

struct PruneRule {
  bool enabled = false;
  double checkpoint_fraction = 0.25;
  std::size_t min_history = 3;  // earlier checkpoints needed before pruning
};

struct TrialContext {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  TrialSample sample;
  // Reports the discrepancy at the checkpoint; false means abandon the trial.
  std::function<bool(double)> checkpoint;
};

struct TrialOutcome {
  std::optional<double> ssim;
  double final_discrepancy = 0.0;
  bool diverged = false;
  bool pruned = false;
  std::optional<std::size_t> proxy_candidate;
  std::string note;
};

using Objective = std::function<TrialOutcome(const TrialContext&)>;

struct SearchOptions {
  std::size_t n_trials = 100;
  std::uint64_t master_seed = 0;
  std::size_t jobs = 1;
  PruneRule prune;
  // Called once per record in index order (streaming sinks).
  std::function<void(const TrialRecord&)> on_record;
};

struct SearchResult {
  std::vector<TrialRecord> records;  // index order, one per trial
  std::size_t best = 0;              // index into records

  const TrialRecord& best_record() const { return records.at(best); }
};

class SearchFailed : public RuntimeFailure {
 public:
  SearchFailed(const std::string& what, std::vector<TrialRecord> records)
      : RuntimeFailure(what), records(std::move(records)) {}
  std::vector<TrialRecord> records;
};

// Highest SSIM among scored records, ties to the lower index.
std::optional<std::size_t> select_best(const std::vector<TrialRecord>& records);

// Pruning compares a trial's checkpoint against the median of the checkpoints
// of lower-indexed trials, so the outcome does not depend on `jobs`.
SearchResult run_trials(const SearchSpace& space, const SearchOptions& options, const Objective& objective);

// One candidate batch of the pool: the observed update and the private truth
// used only for scoring.
struct PoolEntry {
  fed::ClientUpdate update;
  nn::Batch truth;
};

struct AttackProblem {
  attack::AttackModel model;
  std::vector<PoolEntry> pool;  // size must equal SearchSpace::batch_pool
  attack::AttackConfig base;    // iterations, stat_source, aux_batches, proxy_selection
};

attack::AttackConfig trial_config(const attack::AttackConfig& base, const TrialSample& sample, std::uint64_t seed);

SearchResult run_search(const SearchSpace& space, const SearchOptions& options, const AttackProblem& problem);

}  // namespace gia::search
