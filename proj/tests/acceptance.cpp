// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Usage: acceptance [--only 1,2,...] [--out DIR]
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "gia/attack.hpp"
#include "gia/batchnorm.hpp"
#include "gia/experiment.hpp"
#include "gia/search.hpp"
#include "test_util.hpp"

namespace {

using namespace gia;
using gia::testing::random_normal;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

std::string fix(double v, int digits = 3) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string out_root = "acceptance_out";

// 1-block, width-1 model on 3x8x8 inputs.
nn::ModelConfig tiny_model() {
  nn::ModelConfig c;
  c.depth = 1;
  c.width_multiplier = 1;
  c.height = c.width = 8;
  c.num_classes = 10;
  return c;
}

Verdict gradient_gate() {
  const auto cfg = tiny_model();
  double worst = 0.0;
  for (nn::BlockStyle style : {nn::BlockStyle::PreActivation, nn::BlockStyle::PostActivation}) {
    auto c = cfg;
    c.block_style = style;
    const auto m = nn::build_model(c, 3);
    const Tensor x = random_normal(c.input_shape(2), 4);
    for (nn::Mode mode : {nn::Mode::Training, nn::Mode::Inference}) {
      auto lg = nn::build_loss_graph(m.architecture, mode, m.architecture.initial_running_stats(), 2, {1, 7});
      auto b = lg.bind(m.params);
      b[lg.input] = x;
      worst = std::max(worst, ad::check_gradient(lg.graph, lg.loss, lg.input, x, b, 1e-5));
      for (std::size_t p = 0; p < lg.param_leaves.size(); ++p) {
        worst = std::max(worst, ad::check_gradient(lg.graph, lg.loss, lg.param_leaves[p],
                                                   m.params.entries()[p].value, b, 1e-5));
      }
    }
  }
  return {worst < 1e-6, "max rel err " + sci(worst) + " over all parameters and the input, both modes and block styles"};
}

Verdict second_order_gate() {
  const auto c = tiny_model();
  const auto m = nn::build_model(c, 5);
  const auto running = m.architecture.initial_running_stats();
  const std::vector<std::size_t> labels{2, 5};
  double worst = 0.0;
  for (nn::Mode mode : {nn::Mode::Training, nn::Mode::Inference}) {
    const Tensor truth = random_normal(c.input_shape(2), 6);
    const auto target = nn::loss_and_gradients(m.architecture, m.params, {truth, labels}, mode, running).gradients;
    auto lg = nn::build_loss_graph(m.architecture, mode, running, 2, labels);
    const auto d = attack::cosine_discrepancy(lg.graph, lg.grads, target);
    auto b = lg.bind(m.params);
    const Tensor x = random_normal(c.input_shape(2), 7);
    b[lg.input] = x;
    worst = std::max(worst, ad::check_gradient(lg.graph, d, lg.input, x, b, 1e-5));
  }
  return {worst < 1e-5, "max rel err " + sci(worst) + ", both modes"};
}

Verdict bn_invariants() {
  double worst_sum = 0.0, worst_inner = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const std::size_t channels = 1 + seed % 4;
    const Tensor x = random_normal({1 + seed % 5, channels, 1 + seed % 3, 2 + seed % 4}, 1000 + seed, 2.0);
    const Tensor g = random_normal(x.shape(), 2000 + seed);
    // epsilon 0 so sigma is exactly the batch standard deviation
    const auto r = nn::batchnorm_forward(x, nn::BNState::initial(channels, nn::Mode::Training, 0.1, 0.0));
    if (r.cache.n < 2) continue;
    const Tensor dx = nn::bn_input_grad_training(g, r.cache);
    const std::size_t plane = x.dim(2) * x.dim(3);
    for (std::size_t c = 0; c < channels; ++c) {
      double sum = 0.0, inner = 0.0;
      for (std::size_t b = 0; b < x.dim(0); ++b)
        for (std::size_t i = 0; i < plane; ++i) {
          const std::size_t k = (b * channels + c) * plane + i;
          sum += dx[k];
          inner += dx[k] * r.cache.normalized[k];
        }
      worst_sum = std::max(worst_sum, std::abs(sum));
      worst_inner = std::max(worst_inner, std::abs(inner));
    }
  }
  return {worst_sum < 1e-9 && worst_inner < 1e-9,
          "max |sum dx| " + sci(worst_sum) + ", max |<dx, xhat>| " + sci(worst_inner) + " over 100 cases"};
}

Verdict recovery_round_trip() {
  double worst = 0.0;
  bool saw_unit = false;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    nn::ModelConfig c = tiny_model();
    c.block_style = seed % 2 ? nn::BlockStyle::PreActivation : nn::BlockStyle::PostActivation;
    c.base_width = 4;
    c.bn_momentum = seed % 10 == 0 ? 1.0 : 0.005 + 0.01 * static_cast<double>(seed);
    saw_unit = saw_unit || c.bn_momentum == 1.0;
    const auto m = nn::build_model(c, seed);
    const std::size_t b = 2 + seed % 4;
    nn::Batch batch{random_normal(c.input_shape(b), 500 + seed, 1.0 + 0.02 * static_cast<double>(seed)), {}};
    for (std::size_t i = 0; i < b; ++i) batch.labels.push_back((seed + 3 * i) % c.num_classes);
    // random prior running statistics
    auto running = m.architecture.initial_running_stats();
    for (std::size_t l = 0; l < running.size(); ++l) {
      running[l].mean = random_normal(running[l].mean.shape(), 700 + seed * 8 + l);
      running[l].var = gia::testing::random_tensor(running[l].var.shape(), 900 + seed * 8 + l, 0.5, 2.0);
    }
    const auto u = fed::client_step(m.architecture, m.params, batch, {nn::Mode::Training, true}, running);
    const auto rec = attack::recover_update_stats(u);
    const auto truth = nn::loss_and_gradients(m.architecture, m.params, batch, nn::Mode::Training, running);
    for (std::size_t l = 0; l < rec.size(); ++l) {
      worst = std::max({worst, max_abs_diff(rec[l].mean, truth.batch_stats[l].mean),
                        max_abs_diff(rec[l].var_biased, truth.batch_stats[l].var_biased)});
    }
  }
  return {worst < 1e-10 && saw_unit, "max abs err " + sci(worst) + " over 100 cases including m = 1"};
}

Verdict regularizer_spots() {
  double tv = 0.0;
  for (double v : {-1.5, 0.0, 0.3, 2.0}) tv = std::max(tv, attack::total_variation(Tensor({2, 3, 8, 8}, v)));
  const auto c = tiny_model();
  const auto m = nn::build_model(c, 9);
  const nn::Batch batch{random_normal(c.input_shape(3), 10), {0, 4, 4}};
  const auto u = fed::client_step(m.architecture, m.params, batch, {nn::Mode::Training, true},
                                  m.architecture.initial_running_stats());
  const auto truth = nn::loss_and_gradients(m.architecture, m.params, batch, nn::Mode::Training,
                                            m.architecture.initial_running_stats());
  const double rbn = attack::r_bn(truth.batch_stats, attack::recover_update_stats(u));
  const double self = std::abs(attack::cosine_discrepancy(u.gradients, u.gradients));
  return {tv < 1e-6 && rbn < 1e-9 && self < 1e-12,
          "R_TV(const) " + sci(tv) + ", R_BN(match) " + sci(rbn) + ", self-match " + sci(self)};
}

exp::KvConfig inference_config() {
  exp::KvConfig kv;
  kv.set("image_size", "32");
  kv.set("batch_size", "4");
  kv.set("iterations", "1000");
  kv.set("seed", "0");
  kv.set("out", out_root + "/inference");
  return kv;
}

Verdict inference_success() {
  const auto cfg = exp::ExperimentConfig::from(inference_config());
  const auto cell = exp::run_cell(cfg, "postact_standard", exp::Setting::Inference, 20, derive_seed(cfg.seed, 6),
                                  out_root + "/inference");
  if (!cell.best_ssim) return {false, "no trial scored: " + cell.error};
  return {cell.success, "best SSIM " + fix(*cell.best_ssim) + " vs threshold " + fix(*cell.baseline + 0.3) +
                            " (baseline " + fix(*cell.baseline) + "), mean " + fix(*cell.mean_ssim) + ", " +
                            std::to_string(cell.scored) + "/20 scored"};
}

// Small-image matrix used by criteria 7 and 8.
exp::KvConfig matrix_config(const std::string& out) {
  exp::KvConfig kv;
  kv.set("image_size", "8");
  kv.set("batch_size", "1");
  kv.set("synthetic_count", "64");
  kv.set("iterations", "2000");
  kv.set("matrix_trials", "20");
  kv.set("seed", "0");
  kv.set("out", out);
  return kv;
}

std::optional<exp::MatrixReport> matrix;
double matrix_seconds = 0.0;

void ensure_matrix() {
  if (matrix) return;
  const auto start = std::chrono::steady_clock::now();
  matrix = exp::cmd_matrix(exp::ExperimentConfig::from(matrix_config(out_root + "/matrix")));
  matrix_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::printf("%s", matrix->markdown.c_str());
}

Verdict matrix_ordering() {
  ensure_matrix();

  using exp::Setting;
  const auto& rec = matrix->cell("preact_wide", Setting::StatsShared);
  const auto& prox = matrix->cell("preact_wide", Setting::NoStats);
  std::vector<std::string> problems;
  auto best = [](const exp::CellReport& c) { return c.best_ssim.value_or(-1.0); };
  if (!(best(rec) >= best(prox))) problems.push_back("recovered < proxy");
  if (!prox.baseline || !(best(prox) >= *prox.baseline)) problems.push_back("proxy < baseline");
  if (!rec.success) problems.push_back("preact_wide/stats-shared not a success");
  if (!prox.success) problems.push_back("preact_wide/no-stats not a success");
  for (const char* p : {"postact_wide", "postact_standard"}) {
    for (Setting s : {Setting::NoStats, Setting::StatsShared}) {
      if (matrix->cell(p, s).success) problems.push_back(std::string(p) + "/" + exp::setting_name(s) + " succeeded");
    }
  }
  std::string detail = "preact_wide recovered " + fix(best(rec)) + " >= proxy " + fix(best(prox)) + " >= baseline " +
                       fix(prox.baseline.value_or(NAN));
  for (const auto& p : problems) detail += "; " + p;
  return {problems.empty(), detail};
}

Verdict negative_control() {
  ensure_matrix();
  std::string detail;
  bool pass = true;
  for (exp::Setting s : exp::kSettings) {
    const auto& c = matrix->cell("deep_narrow_noskip", s);
    pass = pass && !c.success;
    detail += std::string(detail.empty() ? "" : ", ") + exp::setting_name(s) + " " + (c.success ? "✓" : "×") + " " +
              fix(c.best_ssim.value_or(NAN));
  }
  return {pass, detail};
}

// Reduced budget: the property is independent of the number of iterations.
Verdict matrix_determinism() {
  auto kv = matrix_config(out_root + "/determinism");
  kv.set("iterations", "60");
  kv.set("matrix_trials", "4");
  kv.set("jobs", "2");
  const auto cfg = exp::ExperimentConfig::from(kv);
  const std::string first = exp::cmd_matrix(cfg).json;
  std::ifstream in(out_root + "/determinism/matrix.json", std::ios::binary);
  std::stringstream on_disk;
  on_disk << in.rdbuf();
  const std::string second = exp::cmd_matrix(cfg).json;
  return {first == second && on_disk.str() == first && !first.empty(),
          std::to_string(first.size()) + "-byte reports " + (first == second ? "identical" : "differ")};
}

Verdict search_harness() {
  using namespace gia::search;
  bool ok = true;
  std::string detail;
  auto objective = [](const TrialContext& ctx) {
    std::this_thread::sleep_for(std::chrono::milliseconds(3 * (5 - ctx.index)));
    TrialOutcome out;
    const double z = std::log10(ctx.sample.learning_rate) + 1.5;
    out.ssim = 1.0 - z * z / 4.0;
    out.final_discrepancy = z * z;
    return out;
  };
  SearchOptions opt;
  opt.n_trials = 5;
  opt.master_seed = 11;
  const auto serial = run_trials({}, opt, objective);
  std::size_t argmax = 0;
  for (std::size_t i = 1; i < 5; ++i)
    if (*serial.records[i].ssim > *serial.records[argmax].ssim) argmax = i;
  ok = ok && serial.best == argmax;
  detail += "argmax " + std::string(serial.best == argmax ? "ok" : "wrong");

  std::vector<TrialRecord> tied(serial.records);
  for (auto& r : tied) r.ssim = 0.5;
  tied[1].ssim = 0.9;
  tied[3].ssim = 0.9;
  const bool ties = select_best(tied) == 1u;
  ok = ok && ties;
  detail += ", ties " + std::string(ties ? "ok" : "wrong");

  opt.jobs = 3;
  const auto parallel = run_trials({}, opt, objective);
  bool same = parallel.best == serial.best;
  for (std::size_t i = 0; i < 5; ++i) same = same && same_outcome(serial.records[i], parallel.records[i]);
  ok = ok && same;
  detail += ", parallel == serial " + std::string(same ? "ok" : "wrong");
  return {ok, detail};
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<Verdict()> run;
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string item;
      while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
    } else if (a == "--out" && i + 1 < argc) {
      out_root = argv[++i];
    } else {
      std::fprintf(stderr, "usage: acceptance [--only 1,2,...] [--out DIR]\n");
      return 2;
    }
  }
  std::filesystem::create_directories(out_root);
  exp::set_log_sink([](const std::string& m) {
    if (m.find(": trial") == std::string::npos) std::fprintf(stderr, "  %s\n", m.c_str());
  });

  const std::vector<Criterion> criteria = {
      {1, "gradient correctness gate", 60, gradient_gate},
      {2, "second-order gate", 120, second_order_gate},
      {3, "BatchNorm training-mode invariants", 0, bn_invariants},
      {4, "statistic recovery round trip", 0, recovery_round_trip},
      {5, "regularizer spot values", 0, regularizer_spots},
      {6, "inference-mode success, postact_standard B=4 32x32", 20 * 60, inference_success},
      {7, "training-mode matrix ordering", 45 * 60, matrix_ordering},
      {8, "deep_narrow_noskip negative control", 0, negative_control},
      {9, "matrix determinism", 0, matrix_determinism},
      {10, "search harness selection and parallel equality", 60, search_harness},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (c.id == 7) secs = matrix_seconds;  // the time of the full matrix, whichever criterion triggered it
    std::string timing = fix(secs, 1) + " s";
    if (c.budget_seconds > 0) {
      timing += " (limit " + fix(c.budget_seconds, 0) + " s)";
      if (secs >= c.budget_seconds) {
        v.pass = false;
        v.detail += "; over time budget";
      }
    }
    failed += !v.pass;
    std::printf("[%s] %2d %s: %s; %s\n", v.pass ? "PASS" : "FAIL", c.id, c.name, v.detail.c_str(), timing.c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
