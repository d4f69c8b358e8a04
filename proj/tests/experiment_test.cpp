#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "gia/errors.hpp"
#include "gia/experiment.hpp"
#include "gia/gia.h"
#include "json.hpp"

namespace gia::exp {
namespace {

namespace fs = std::filesystem;

std::string temp_dir(const std::string& name) {
  const fs::path p = fs::path(::testing::TempDir()) / ("gia_exp_" + name);
  fs::remove_all(p);
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small enough that a whole matrix finishes in seconds.
KvConfig tiny(const std::string& out) {
  KvConfig kv;
  kv.set("image_size", "8");
  kv.set("synthetic_count", "24");
  kv.set("num_classes", "3");
  kv.set("batch_size", "2");
  kv.set("batch_pool", "2");
  kv.set("aux_batches", "2");
  kv.set("iterations", "6");
  kv.set("matrix_trials", "2");
  kv.set("matrix_presets", "preact_wide,postact_standard");
  kv.set("out", out);
  return kv;
}

TEST(KvConfigTest, ParsesCommentsAndWhitespace) {
  const auto kv = KvConfig::parse("# header\n  seed = 42  \nbatch_size=8 # trailing\n\nlambda_tv = 1e-3\n");
  EXPECT_EQ(kv.get_u64("seed"), 42u);
  EXPECT_EQ(kv.get_size("batch_size"), 8u);
  EXPECT_DOUBLE_EQ(kv.get_double("lambda_tv"), 1e-3);
  EXPECT_TRUE(kv.is_set("seed"));
  EXPECT_FALSE(kv.is_set("preset"));
  EXPECT_EQ(kv.get("preset"), "preact_wide");
}

TEST(KvConfigTest, RejectsMalformedInput) {
  EXPECT_THROW(KvConfig::parse("seed 4\n"), PreconditionError);
  try {
    KvConfig::parse("seed = 1\nno_such_key = 3\n", "cfg.txt");
    FAIL() << "expected PreconditionError";
  } catch (const PreconditionError& e) {
    EXPECT_NE(std::string(e.what()).find("cfg.txt:2"), std::string::npos);
  }
  KvConfig kv;
  kv.set("seed", "-1");
  EXPECT_THROW(kv.get_u64("seed"), PreconditionError);
  kv.set("lambda_tv", "abc");
  EXPECT_THROW(kv.get_double("lambda_tv"), PreconditionError);
  kv.set("smoothing", "maybe");
  EXPECT_THROW(kv.get_bool("smoothing"), PreconditionError);
  EXPECT_THROW(KvConfig::load("/nonexistent/config.txt"), PreconditionError);
}

TEST(KvConfigTest, ListsBoolsAndDumpRoundTrip) {
  KvConfig kv;
  kv.set("sweep_sizes", "1, 2 ,,4");
  EXPECT_EQ(kv.get_list("sweep_sizes"), (std::vector<std::string>{"1", "2", "4"}));
  kv.set("prune", "on");
  EXPECT_TRUE(kv.get_bool("prune"));
  kv.set("prune", "no");
  EXPECT_FALSE(kv.get_bool("prune"));
  const auto back = KvConfig::parse(kv.dump());
  EXPECT_EQ(back.resolved(), kv.resolved());
  EXPECT_EQ(kv.resolved().size(), KvConfig::keys().size());
}

TEST(ExperimentConfigTest, ResolvesAndValidates) {
  KvConfig kv;
  const auto c = ExperimentConfig::from(kv);
  EXPECT_EQ(c.preset, "preact_wide");
  EXPECT_EQ(c.batch_size, 4u);
  EXPECT_EQ(c.matrix_presets.size(), 4u);
  EXPECT_EQ(c.sweep_sizes, (std::vector<std::size_t>{1, 2, 4, 8}));
  EXPECT_EQ(c.space.grad_compare, (std::vector<double>{1.0, 0.5, 0.25}));

  auto bad = [](const std::string& key, const std::string& value) {
    KvConfig k;
    k.set(key, value);
    return k;
  };
  EXPECT_THROW(ExperimentConfig::from(bad("batch_size", "0")), PreconditionError);
  EXPECT_THROW(ExperimentConfig::from(bad("preset", "resnet152")), PreconditionError);
  EXPECT_THROW(ExperimentConfig::from(bad("mode", "eval")), PreconditionError);
  EXPECT_THROW(ExperimentConfig::from(bad("dataset", "cifar")), PreconditionError);  // no path
  EXPECT_THROW(ExperimentConfig::from(bad("stat_source", "magic")), PreconditionError);
  EXPECT_THROW(ExperimentConfig::from(bad("grad_compare", "0")), PreconditionError);
  EXPECT_THROW(ExperimentConfig::from(bad("matrix_presets", "preact_wide,nope")), PreconditionError);
}

TEST(PresetTest, EachNameMapsToOneDistinctModel) {
  std::vector<std::string> descriptions;
  for (const auto& name : preset_names()) {
    const auto c = preset_config(name, 3, 32, 32, 10);
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(c.height, 32u);
    const auto p = nn::Architecture(c).parameter_layout();
    std::string d = std::to_string(static_cast<int>(c.block_style)) + "/" + std::to_string(c.depth) + "/" +
                    std::to_string(c.width_multiplier) + "/" + std::to_string(c.skip_connections) + "/" +
                    std::to_string(p.size());
    descriptions.push_back(d);
  }
  std::sort(descriptions.begin(), descriptions.end());
  EXPECT_EQ(std::unique(descriptions.begin(), descriptions.end()), descriptions.end());
  EXPECT_EQ(preset_config("preact_wide", 3, 8, 8, 10).block_style, nn::BlockStyle::PreActivation);
  EXPECT_FALSE(preset_config("deep_narrow_noskip", 3, 8, 8, 10).skip_connections);
  EXPECT_THROW(preset_config("vgg", 3, 8, 8, 10), PreconditionError);
}

TEST(RandomBaselineTest, DeterministicAndNearZero) {
  const auto cfg = ExperimentConfig::from(tiny(temp_dir("baseline")));
  const Scenario s = make_scenario(cfg, "preact_wide");
  const auto plan = plan_batches(cfg, s, 2);
  EXPECT_EQ(plan.pool.size(), 2u);
  EXPECT_EQ(plan.aux.size(), 2u);
  const double a = random_baseline(plan.pool[0], s.norm, 5);
  EXPECT_EQ(a, random_baseline(plan.pool[0], s.norm, 5));
  EXPECT_LT(std::abs(a), 0.15);
}

TEST(ModelFileTest, RoundTrip) {
  auto kv = tiny(temp_dir("model"));
  kv.set("pretrain_steps", "2");
  const auto cfg = ExperimentConfig::from(kv);
  const Scenario s = make_scenario(cfg, "deep_narrow_noskip");
  const Scenario back = decode_model(encode_model(s));
  EXPECT_EQ(back.model.params, s.model.params);
  EXPECT_EQ(back.running, s.running);
  EXPECT_EQ(back.norm.mean, s.norm.mean);
  EXPECT_EQ(back.norm.stddev, s.norm.stddev);
  EXPECT_EQ(back.model.architecture.parameter_layout(), s.model.architecture.parameter_layout());
  // pretraining moved the running statistics off their initial values
  EXPECT_NE(s.running, s.model.architecture.initial_running_stats());
}

TEST(ClientCommandTest, SameSeedGivesIdenticalFiles) {
  const std::string a = temp_dir("client_a"), b = temp_dir("client_b");
  auto kv = tiny(a);
  const auto ra = cmd_client(ExperimentConfig::from(kv));
  kv.set("out", b);
  const auto rb = cmd_client(ExperimentConfig::from(kv));
  EXPECT_EQ(slurp(ra.update_path), slurp(rb.update_path));
  EXPECT_EQ(slurp(ra.truth_path), slurp(rb.truth_path));
  EXPECT_EQ(slurp(ra.model_path), slurp(rb.model_path));
  kv.set("seed", "1");
  kv.set("out", temp_dir("client_c"));
  EXPECT_NE(slurp(ra.update_path), slurp(cmd_client(ExperimentConfig::from(kv)).update_path));
  const auto meta = nlohmann::json::parse(slurp(a + "/client.json"));
  EXPECT_EQ(meta["config"]["seed"], "0");
}

TEST(ClientCommandTest, SharingPolicyShapesTheContainer) {
  auto kv = tiny(temp_dir("client_share"));
  kv.set("share_stats", "false");
  const auto c = fed::load_container(cmd_client(ExperimentConfig::from(kv)).update_path);
  for (const auto& e : c.entries) EXPECT_EQ(e.name.rfind("stats_", 0), std::string::npos) << e.name;

  kv.set("share_stats", "true");
  kv.set("mode", "inference");
  kv.set("out", temp_dir("client_inf"));
  const auto u = fed::decode_update(fed::load_container(cmd_client(ExperimentConfig::from(kv)).update_path));
  ASSERT_TRUE(u.has_stats());
  EXPECT_EQ(*u.stats_before, *u.stats_after);
}

TEST(AttackCommandTest, WritesOneImagePerBatchItem) {
  const std::string dir = temp_dir("attack");
  auto kv = tiny(dir);
  kv.set("batch_size", "3");
  const auto art = cmd_client(ExperimentConfig::from(kv));
  kv.set("stat_source", "recovered");
  const auto out = cmd_attack(ExperimentConfig::from(kv), art.update_path, art.model_path, art.truth_path);
  ASSERT_EQ(out.images.size(), 4u);  // three reconstructions and the panel
  for (const auto& p : out.images) EXPECT_TRUE(fs::exists(p)) << p;
  ASSERT_TRUE(out.score.has_value());
  const auto j = nlohmann::json::parse(slurp(dir + "/result.json"));
  EXPECT_EQ(j["ssim"].get<double>(), out.score->mean_ssim);
  EXPECT_EQ(j["discrepancy_trace"].size(), 6u);
  EXPECT_EQ(j["config"]["batch_size"], "3");

  kv.set("stat_source", "proxy");
  kv.set("out", temp_dir("attack_proxy"));
  const auto proxy = cmd_attack(ExperimentConfig::from(kv), art.update_path, art.model_path, std::nullopt);
  EXPECT_TRUE(proxy.result.proxy_candidate.has_value());
  EXPECT_FALSE(proxy.score.has_value());
  EXPECT_EQ(proxy.images.size(), 3u);
}

TEST(AttackCommandTest, RecoveredSourceNeedsSnapshots) {
  auto kv = tiny(temp_dir("attack_refuse"));
  kv.set("share_stats", "false");
  const auto art = cmd_client(ExperimentConfig::from(kv));
  kv.set("stat_source", "recovered");
  EXPECT_THROW(cmd_attack(ExperimentConfig::from(kv), art.update_path, art.model_path, std::nullopt),
               PreconditionError);
}

TEST(MatrixCommandTest, GridShapeSeedsAndDeterminism) {
  const std::string a = temp_dir("matrix_a"), b = temp_dir("matrix_b");
  auto kv = tiny(a);
  kv.set("jobs", "2");
  const auto ra = cmd_matrix(ExperimentConfig::from(kv));
  ASSERT_EQ(ra.cells.size(), 2u * 3u);
  kv.set("out", b);
  kv.set("jobs", "1");
  const auto rb = cmd_matrix(ExperimentConfig::from(kv));
  // the embedded config records `out` and `jobs`; everything else must match
  auto ja = nlohmann::json::parse(ra.json), jb = nlohmann::json::parse(rb.json);
  ja.erase("config");
  jb.erase("config");
  EXPECT_EQ(ja, jb);

  std::set<std::uint64_t> seeds;
  for (const auto& cell : ja["cells"]) {
    EXPECT_EQ(cell["n_trials"], 2);
    EXPECT_EQ(cell["trials"].size(), 2u);
    seeds.insert(cell["search_seed"].get<std::uint64_t>());
  }
  EXPECT_EQ(seeds.size(), 6u);
  EXPECT_TRUE(fs::exists(a + "/matrix.md"));
  EXPECT_NE(ra.markdown.find("| postact_standard |"), std::string::npos);
  EXPECT_EQ(ra.cell("preact_wide", Setting::Inference).setting, Setting::Inference);
  EXPECT_THROW(ra.cell("deep_narrow_noskip", Setting::Inference), PreconditionError);
}

TEST(MatrixCommandTest, CellSeedsDoNotDependOnPresetSubset) {
  auto kv = tiny(temp_dir("matrix_subset"));
  kv.set("matrix_presets", "postact_standard");
  const auto r = cmd_matrix(ExperimentConfig::from(kv));
  kv.set("out", temp_dir("matrix_subset_full"));
  kv.set("matrix_presets", "preact_wide,postact_standard");
  const auto full = cmd_matrix(ExperimentConfig::from(kv));
  for (Setting s : kSettings) {
    EXPECT_EQ(r.cell("postact_standard", s).search_seed, full.cell("postact_standard", s).search_seed);
    EXPECT_EQ(r.cell("postact_standard", s).best_ssim, full.cell("postact_standard", s).best_ssim);
  }
}

TEST(SearchCommandTest, WritesTrialRecords) {
  const std::string dir = temp_dir("search");
  auto kv = tiny(dir);
  kv.set("n_trials", "3");
  const auto cell = cmd_search(ExperimentConfig::from(kv));
  EXPECT_EQ(cell.records.size(), 3u);
  std::ifstream in(dir + "/trials.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) EXPECT_EQ(nlohmann::json::parse(line)["trial"], n++);
  EXPECT_EQ(n, 3u);
  EXPECT_TRUE(fs::exists(dir + "/panel.ppm"));
}

TEST(BatchsweepCommandTest, OnePointPerSizeAndLimits) {
  const std::string dir = temp_dir("sweep");
  auto kv = tiny(dir);
  kv.set("sweep_sizes", "1");
  kv.set("sweep_trials", "1");
  auto pts = cmd_batchsweep(ExperimentConfig::from(kv));
  ASSERT_EQ(pts.size(), 1u);
  EXPECT_EQ(pts[0].batch_size, 1u);
  kv.set("sweep_sizes", "1,3");
  pts = cmd_batchsweep(ExperimentConfig::from(kv));
  ASSERT_EQ(pts.size(), 2u);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir + "/batchsweep.json"))["points"].size(), 2u);
  EXPECT_NE(slurp(dir + "/batchsweep.svg").find("<svg"), std::string::npos);
  kv.set("sweep_sizes", "7");  // 7 x (2 + 2) images exceed the 24 available
  EXPECT_THROW(cmd_batchsweep(ExperimentConfig::from(kv)), PreconditionError);
}

TEST(SelftestTest, AllChecksPass) {
  for (const auto& item : selftest()) EXPECT_TRUE(item.pass) << item.name << ": " << item.detail;
}

TEST(CApiTest, StatusCodesAndErrors) {
  gia_config* cfg = nullptr;
  ASSERT_EQ(gia_config_new(&cfg), GIA_OK);
  EXPECT_EQ(gia_config_set(cfg, "bogus", "1"), GIA_PRECONDITION);
  EXPECT_NE(std::string(gia_last_error()).find("bogus"), std::string::npos);
  EXPECT_EQ(gia_config_set(cfg, "seed", "7"), GIA_OK);
  EXPECT_STREQ(gia_last_error(), "");
  char* value = nullptr;
  ASSERT_EQ(gia_config_get(cfg, "seed", &value), GIA_OK);
  EXPECT_STREQ(value, "7");
  gia_string_free(value);
  EXPECT_EQ(gia_config_set(cfg, "batch_size", "0"), GIA_OK);
  EXPECT_EQ(gia_config_validate(cfg), GIA_PRECONDITION);
  EXPECT_EQ(gia_config_set(nullptr, "seed", "1"), GIA_PRECONDITION);
  gia_config_free(cfg);

  gia_update* u = nullptr;
  EXPECT_EQ(gia_update_load("/nonexistent.giau", &u), GIA_PRECONDITION);
  EXPECT_EQ(u, nullptr);
  EXPECT_EQ(gia_config_load("/nonexistent.cfg", &cfg), GIA_PRECONDITION);
}

TEST(CApiTest, ClientAttackPipeline) {
  const std::string dir = temp_dir("capi");
  gia_config* cfg = nullptr;
  ASSERT_EQ(gia_config_parse(("image_size = 8\nsynthetic_count = 24\nbatch_pool = 2\naux_batches = 2\n"
                              "iterations = 4\nshare_stats = false\nout = " + dir + "\n").c_str(), &cfg),
            GIA_OK);
  gia_client_result files{};
  ASSERT_EQ(gia_cmd_client(cfg, &files), GIA_OK) << gia_last_error();

  gia_update* u = nullptr;
  ASSERT_EQ(gia_update_load(files.update_path, &u), GIA_OK);
  gia_update_info info{};
  ASSERT_EQ(gia_update_info_get(u, &info), GIA_OK);
  EXPECT_EQ(info.batch_size, 4u);
  EXPECT_FALSE(info.has_stats);
  gia_update_free(u);
  gia_model* m = nullptr;
  ASSERT_EQ(gia_model_load(files.model_path, &m), GIA_OK);
  gia_model_info mi{};
  ASSERT_EQ(gia_model_info_get(m, &mi), GIA_OK);
  EXPECT_EQ(mi.height, 8u);
  gia_model_free(m);

  gia_attack_result r{};
  ASSERT_EQ(gia_config_set(cfg, "stat_source", "recovered"), GIA_OK);
  EXPECT_EQ(gia_cmd_attack(cfg, files.update_path, files.model_path, nullptr, &r), GIA_PRECONDITION);
  ASSERT_EQ(gia_config_set(cfg, "stat_source", "none"), GIA_OK);
  ASSERT_EQ(gia_cmd_attack(cfg, files.update_path, files.model_path, files.truth_path, &r), GIA_OK);
  EXPECT_EQ(r.image_count, 4u);
  EXPECT_FALSE(std::isnan(r.ssim));
  gia_client_result_free(&files);
  gia_config_free(cfg);
}

}  // namespace
}  // namespace gia::exp
