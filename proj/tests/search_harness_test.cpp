#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <thread>

#include "gia/data.hpp"
#include "gia/search.hpp"
#include "json.hpp"

namespace gia::search {
namespace {

// Cheap deterministic objective: score peaks where log(lr) = -3.
TrialOutcome synthetic_objective(const TrialContext& ctx) {
  TrialOutcome out;
  const double z = std::log10(ctx.sample.learning_rate) + 1.5;
  out.ssim = 1.0 - z * z / 4.0;
  out.final_discrepancy = z * z;
  return out;
}

TEST(SampleTrialTest, DegenerateBoundsAndDeterminism) {
  SearchSpace s;
  s.lambda_bn = {0.5, 0.5};
  s.lambda_tv = {2e-3, 2e-3};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng a(seed), b(seed);
    const auto ta = sample_trial(s, a);
    EXPECT_EQ(ta.lambda_bn, 0.5);
    EXPECT_EQ(ta.lambda_tv, 2e-3);
    EXPECT_EQ(ta, sample_trial(s, b));
    EXPECT_LT(ta.batch_id, s.batch_pool);
    EXPECT_GE(ta.learning_rate, 1e-3);
    EXPECT_LE(ta.learning_rate, 1.0);
  }
}

TEST(SampleTrialTest, LogUniformQuartiles) {
  SearchSpace s;
  Rng rng(1234);
  std::vector<double> logs;
  for (int i = 0; i < 10000; ++i) logs.push_back(std::log(sample_trial(s, rng).lambda_bn));
  std::sort(logs.begin(), logs.end());
  const double lo = std::log(1e-4), hi = std::log(1e1);
  for (int q = 1; q <= 3; ++q) {
    const double expected = lo + (hi - lo) * q / 4.0;
    const double got = logs[static_cast<std::size_t>(q * 2500)];
    EXPECT_LT(std::abs(got - expected), 0.05 * (hi - lo)) << "quartile " << q;
  }
}

TEST(SampleTrialTest, InvalidSpaceRejected) {
  SearchSpace s;
  s.learning_rate = {0.0, 1.0};
  Rng rng(1);
  EXPECT_THROW(sample_trial(s, rng), PreconditionError);
  s = {};
  s.batch_pool = 0;
  EXPECT_THROW(sample_trial(s, rng), PreconditionError);
  s = {};
  s.grad_compare = {1.5};
  EXPECT_THROW(sample_trial(s, rng), PreconditionError);
}

TEST(SelectBestTest, ArgmaxWithTiesToLowerIndex) {
  std::vector<TrialRecord> recs(5);
  for (std::size_t i = 0; i < 5; ++i) {
    recs[i].index = i;
    recs[i].ssim = 0.1 * static_cast<double>(i % 3);
  }
  EXPECT_EQ(select_best(recs), 2u);
  recs[4].ssim = 0.2;
  EXPECT_EQ(select_best(recs), 2u);
  recs[3].ssim = 1.0;
  EXPECT_EQ(select_best(recs), 3u);
  recs[3].ssim.reset();
  recs[3].diverged = true;
  EXPECT_EQ(select_best(recs), 2u);
  for (auto& r : recs) r.ssim.reset();
  EXPECT_FALSE(select_best(recs).has_value());
}

TEST(RunTrialsTest, SyntheticObjective) {
  SearchOptions opt;
  opt.n_trials = 5;
  opt.master_seed = 77;
  const auto res = run_trials({}, opt, synthetic_objective);
  ASSERT_EQ(res.records.size(), 5u);
  for (const auto& r : res.records) EXPECT_GE(*res.best_record().ssim, *r.ssim);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(res.records[i].index, i);
    EXPECT_EQ(res.records[i].attack_seed, mix_seed(trial_seed(77, i)));
  }
  // distinct seeds, reproducible
  EXPECT_NE(trial_seed(77, 0), trial_seed(77, 1));
  const auto again = run_trials({}, opt, synthetic_objective);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_TRUE(same_outcome(res.records[i], again.records[i]));

  opt.n_trials = 1;
  EXPECT_EQ(run_trials({}, opt, synthetic_objective).best, 0u);
  opt.n_trials = 0;
  EXPECT_THROW(run_trials({}, opt, synthetic_objective), PreconditionError);
}

TEST(RunTrialsTest, ParallelEqualsSerial) {
  SearchOptions opt;
  opt.n_trials = 5;
  opt.master_seed = 3;
  std::vector<std::size_t> order;
  opt.on_record = [&](const TrialRecord& r) { order.push_back(r.index); };
  // uneven trial durations so completion order differs from index order
  auto slow = [](const TrialContext& ctx) {
    std::this_thread::sleep_for(std::chrono::milliseconds(5 * (5 - ctx.index)));
    return synthetic_objective(ctx);
  };
  const auto serial = run_trials({}, opt, slow);
  opt.jobs = 3;
  const auto parallel = run_trials({}, opt, slow);
  EXPECT_EQ(serial.best, parallel.best);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_TRUE(same_outcome(serial.records[i], parallel.records[i]));
  EXPECT_EQ(order, (std::vector<std::size_t>{0, 1, 2, 3, 4, 0, 1, 2, 3, 4}));
}

TEST(RunTrialsTest, DivergedTrialsFlaggedNotScored) {
  SearchOptions opt;
  opt.n_trials = 4;
  auto obj = [](const TrialContext& ctx) -> TrialOutcome {
    if (ctx.index % 2 == 0) throw attack::AttackDiverged("boom");
    return synthetic_objective(ctx);
  };
  const auto res = run_trials({}, opt, obj);
  EXPECT_TRUE(res.records[0].diverged);
  EXPECT_FALSE(res.records[0].ssim.has_value());
  EXPECT_EQ(res.records[0].note, "boom");
  EXPECT_EQ(res.best % 2, 1u);
  auto all_bad = [](const TrialContext&) -> TrialOutcome { throw attack::AttackDiverged("boom"); };
  try {
    run_trials({}, opt, all_bad);
    FAIL() << "expected SearchFailed";
  } catch (const SearchFailed& e) {
    EXPECT_EQ(e.records.size(), 4u);
  }
  auto precondition = [](const TrialContext&) -> TrialOutcome { throw PreconditionError("bad"); };
  EXPECT_THROW(run_trials({}, opt, precondition), PreconditionError);
}

TEST(RunTrialsTest, MedianPruningIsOrderIndependent) {
  SearchOptions opt;
  opt.n_trials = 8;
  opt.prune.enabled = true;
  opt.prune.min_history = 2;
  auto obj = [](const TrialContext& ctx) {
    TrialOutcome out;
    const double d = static_cast<double>((ctx.index * 5) % 8);
    if (!ctx.checkpoint(d)) {
      out.pruned = true;
      return out;
    }
    out.ssim = 1.0 - d / 10.0;
    return out;
  };
  const auto serial = run_trials({}, opt, obj);
  // checkpoints 0,5,2,7,4,1,6,3 against medians -,-,2.5,2,3.5,4,3,4
  std::vector<std::size_t> pruned;
  for (const auto& r : serial.records)
    if (r.pruned) pruned.push_back(r.index);
  EXPECT_EQ(pruned, (std::vector<std::size_t>{3, 4, 6}));
  opt.jobs = 4;
  const auto parallel = run_trials({}, opt, obj);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_TRUE(same_outcome(serial.records[i], parallel.records[i]));
}

TEST(RecordJsonTest, FieldsMirrorRecord) {
  TrialRecord r;
  r.index = 4;
  r.sample.learning_rate = 0.125;
  r.sample.batch_id = 2;
  r.attack_seed = 0xFFFFFFFFFFFFFFFFull;
  r.final_discrepancy = 0.5;
  auto j = nlohmann::json::parse(record_json(r));
  EXPECT_EQ(j["trial"], 4);
  EXPECT_EQ(j["learning_rate"], 0.125);
  EXPECT_EQ(j["batch_id"], 2);
  EXPECT_EQ(j["attack_seed"].get<std::uint64_t>(), r.attack_seed);
  EXPECT_TRUE(j["ssim"].is_null());
  EXPECT_FALSE(j["diverged"].get<bool>());
  r.ssim = 0.75;
  EXPECT_EQ(nlohmann::json::parse(record_json(r))["ssim"], 0.75);
}

TEST(RunSearchTest, AttackPoolEndToEnd) {
  nn::ModelConfig c;
  c.base_width = 4;
  c.height = c.width = 8;
  auto model = nn::build_model(c, 2);
  const auto running = model.architecture.initial_running_stats();
  auto ds = data::synthetic_shapes({8, 8, 8, 0.08}, 5);
  const auto norm = Normalization::fit(ds.pixels);
  AttackProblem problem;
  problem.model = {&model.architecture, &model.params, &running, norm};
  for (const auto& idx : data::sample_batches(ds.size(), 2, 2, 1)) {
    auto batch = data::make_batch(ds, idx, norm);
    problem.pool.push_back(
        {fed::client_step(model.architecture, model.params, batch, {nn::Mode::Training, true}, running), batch});
  }
  problem.base.iterations = 8;
  problem.base.stat_source = attack::StatSource::Recovered;
  SearchSpace space;
  space.batch_pool = 2;
  SearchOptions opt;
  opt.n_trials = 3;
  opt.master_seed = 9;
  const auto a = run_search(space, opt, problem);
  opt.jobs = 2;
  const auto b = run_search(space, opt, problem);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(same_outcome(a.records[i], b.records[i]));
    if (a.records[i].scored()) {
      EXPECT_GE(*a.records[i].ssim, -1.0);
      EXPECT_LE(*a.records[i].ssim, 1.0);
    }
  }
  space.batch_pool = 5;
  EXPECT_THROW(run_search(space, opt, problem), PreconditionError);
}

}  // namespace
}  // namespace gia::search
