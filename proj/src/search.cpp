#include "gia/search.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <exception>
#include <mutex>
#include <thread>

#include "gia/metrics.hpp"
#include "json.hpp"

namespace gia::search {

namespace {

void check_range(const LogRange& r, const char* name) {
  if (!(r.lo > 0.0) || !(r.hi >= r.lo) || !std::isfinite(r.hi)) {
    throw PreconditionError(std::string("search range for ") + name + " must satisfy 0 < lo <= hi");
  }
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

void SearchSpace::validate() const {
  check_range(lambda_bn, "lambda_bn");
  check_range(lambda_tv, "lambda_tv");
  check_range(learning_rate, "learning_rate");
  if (grad_compare.empty() || smoothing.empty()) throw PreconditionError("search choices must be nonempty");
  for (double f : grad_compare) {
    if (!(f > 0.0 && f <= 1.0)) throw PreconditionError("grad_compare fractions must lie in (0, 1]");
  }
  if (batch_pool == 0) throw PreconditionError("batch pool must be nonempty");
}

double sample_log_uniform(const LogRange& range, Rng& rng) {
  if (range.lo == range.hi) {
    rng.uniform();  // keep the stream aligned with non-degenerate ranges
    return range.lo;
  }
  return std::exp(rng.uniform(std::log(range.lo), std::log(range.hi)));
}

TrialSample sample_trial(const SearchSpace& space, Rng& rng) {
  space.validate();
  TrialSample s;
  s.lambda_bn = sample_log_uniform(space.lambda_bn, rng);
  s.lambda_tv = sample_log_uniform(space.lambda_tv, rng);
  s.learning_rate = sample_log_uniform(space.learning_rate, rng);
  s.top_fraction = space.grad_compare[rng.below(space.grad_compare.size())];
  s.smoothing = space.smoothing[rng.below(space.smoothing.size())];
  s.batch_id = rng.below(space.batch_pool);
  return s;
}

bool same_outcome(const TrialRecord& a, const TrialRecord& b) {
  const bool same_d = a.final_discrepancy == b.final_discrepancy ||
                      (std::isnan(a.final_discrepancy) && std::isnan(b.final_discrepancy));
  return a.index == b.index && a.sample == b.sample && a.attack_seed == b.attack_seed && a.ssim == b.ssim && same_d &&
         a.diverged == b.diverged && a.pruned == b.pruned && a.proxy_candidate == b.proxy_candidate && a.note == b.note;
}

std::string record_json(const TrialRecord& r) {
  nlohmann::ordered_json j;
  j["trial"] = r.index;
  j["lambda_bn"] = r.sample.lambda_bn;
  j["lambda_tv"] = r.sample.lambda_tv;
  j["learning_rate"] = r.sample.learning_rate;
  j["top_fraction"] = r.sample.top_fraction;
  j["smoothing"] = r.sample.smoothing;
  j["batch_id"] = r.sample.batch_id;
  j["attack_seed"] = r.attack_seed;
  j["ssim"] = r.ssim ? nlohmann::ordered_json(*r.ssim) : nlohmann::ordered_json(nullptr);
  j["final_discrepancy"] = std::isfinite(r.final_discrepancy) ? nlohmann::ordered_json(r.final_discrepancy)
                                                              : nlohmann::ordered_json(nullptr);
  j["wall_seconds"] = r.wall_seconds;
  j["diverged"] = r.diverged;
  j["pruned"] = r.pruned;
  j["proxy_candidate"] = r.proxy_candidate ? nlohmann::ordered_json(*r.proxy_candidate) : nlohmann::ordered_json(nullptr);
  j["note"] = r.note;
  return j.dump();
}

std::uint64_t trial_seed(std::uint64_t master, std::size_t index) { return derive_seed(master, index); }

std::optional<std::size_t> select_best(const std::vector<TrialRecord>& records) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!records[i].scored()) continue;
    if (!best || *records[i].ssim > *records[*best].ssim ||
        (*records[i].ssim == *records[*best].ssim && records[i].index < records[*best].index)) {
      best = i;
    }
  }
  return best;
}

SearchResult run_trials(const SearchSpace& space, const SearchOptions& options, const Objective& objective) {
  space.validate();
  if (options.n_trials == 0) throw PreconditionError("n_trials must be at least 1");
  if (options.jobs == 0) throw PreconditionError("jobs must be at least 1");
  if (options.prune.enabled && !(options.prune.checkpoint_fraction > 0.0 && options.prune.checkpoint_fraction < 1.0)) {
    throw PreconditionError("prune checkpoint must lie in (0, 1)");
  }
  const std::size_t n = options.n_trials;
  std::vector<TrialRecord> records(n);

  std::mutex mu;
  std::condition_variable cv;
  std::vector<char> settled(n, 0), done(n, 0);
  std::vector<std::optional<double>> checkpoints(n);
  std::size_t emitted = 0;
  std::exception_ptr failure;

  auto settle = [&](std::size_t i, std::optional<double> value) {
    std::lock_guard lk(mu);
    if (!settled[i]) {
      settled[i] = 1;
      checkpoints[i] = value;
    }
    cv.notify_all();
  };

  auto run_one = [&](std::size_t i) {
    TrialContext ctx;
    ctx.index = i;
    ctx.seed = trial_seed(options.master_seed, i);
    Rng rng(ctx.seed);
    ctx.sample = sample_trial(space, rng);
    ctx.checkpoint = [&, i](double d) {
      if (!options.prune.enabled) return true;
      std::unique_lock lk(mu);
      cv.wait(lk, [&] { return std::all_of(settled.begin(), settled.begin() + static_cast<std::ptrdiff_t>(i),
                                           [](char s) { return s != 0; }); });
      std::vector<double> history;
      for (std::size_t j = 0; j < i; ++j)
        if (checkpoints[j] && std::isfinite(*checkpoints[j])) history.push_back(*checkpoints[j]);
      settled[i] = 1;
      checkpoints[i] = d;
      cv.notify_all();
      return history.size() < options.prune.min_history || !(d > median(history));
    };

    TrialRecord rec;
    rec.index = i;
    rec.sample = ctx.sample;
    rec.attack_seed = mix_seed(ctx.seed);
    const auto start = std::chrono::steady_clock::now();
    try {
      const TrialOutcome out = objective(ctx);
      rec.ssim = out.ssim;
      rec.final_discrepancy = out.final_discrepancy;
      rec.diverged = out.diverged;
      rec.pruned = out.pruned;
      rec.proxy_candidate = out.proxy_candidate;
      rec.note = out.note;
    } catch (const attack::AttackDiverged& e) {
      rec.diverged = true;
      rec.final_discrepancy = std::numeric_limits<double>::quiet_NaN();
      rec.note = e.what();
    } catch (...) {
      std::lock_guard lk(mu);
      if (!failure) failure = std::current_exception();
    }
    if (rec.diverged || rec.pruned) rec.ssim.reset();
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    settle(i, std::nullopt);

    std::lock_guard lk(mu);
    records[i] = std::move(rec);
    done[i] = 1;
    while (emitted < n && done[emitted]) {
      if (options.on_record && !failure) options.on_record(records[emitted]);
      ++emitted;
    }
  };

  const std::size_t workers = std::min(options.jobs, n);
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) run_one(i);
      });
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  const auto best = select_best(records);
  if (!best) throw SearchFailed("no trial produced a score (all diverged or pruned)", std::move(records));
  return {std::move(records), *best};
}

attack::AttackConfig trial_config(const attack::AttackConfig& base, const TrialSample& sample, std::uint64_t seed) {
  attack::AttackConfig c = base;
  c.lambda_bn = sample.lambda_bn;
  c.lambda_tv = sample.lambda_tv;
  c.learning_rate = sample.learning_rate;
  c.top_fraction = sample.top_fraction;
  c.smoothing = sample.smoothing;
  c.init_seed = seed;
  return c;
}

SearchResult run_search(const SearchSpace& space, const SearchOptions& options, const AttackProblem& problem) {
  space.validate();
  if (problem.pool.size() != space.batch_pool) {
    throw PreconditionError("batch pool holds " + std::to_string(problem.pool.size()) + " batches, search space expects " +
                            std::to_string(space.batch_pool));
  }
  problem.base.validate();
  const std::size_t iters = problem.base.iterations;
  const auto checkpoint_it = static_cast<std::size_t>(std::floor(options.prune.checkpoint_fraction * iters));
  const auto& norm = problem.model.normalization;

  auto objective = [&](const TrialContext& ctx) {
    const PoolEntry& entry = problem.pool[ctx.sample.batch_id];
    auto config = trial_config(problem.base, ctx.sample, mix_seed(ctx.seed));
    if (config.proxy_selection == attack::ProxySelection::OracleSsim) config.oracle_truth = entry.truth;
    bool checked = false;
    auto hook = [&](std::size_t it, double d) {
      if (checked || it + 1 < std::max<std::size_t>(checkpoint_it, 1)) return true;
      checked = true;
      return ctx.checkpoint(d);
    };
    TrialOutcome out;
    try {
      auto result = attack::run_attack(entry.update, problem.model, config, hook);
      out.final_discrepancy = result.final_discrepancy;
      out.proxy_candidate = result.proxy_candidate;
      out.ssim = metrics::best_assignment_ssim(norm.denormalize(result.reconstruction), norm.denormalize(entry.truth.images))
                     .mean_ssim;
    } catch (const attack::AttackAborted& e) {
      out.pruned = true;
      out.final_discrepancy = std::numeric_limits<double>::quiet_NaN();
      out.note = e.what();
    }
    return out;
  };
  return run_trials(space, options, objective);
}

}  // namespace gia::search
