#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gia/attack.hpp"
#include "gia/data.hpp"
#include "gia/fed_client.hpp"
#include "gia/image.hpp"
#include "gia/metrics.hpp"
#include "gia/model.hpp"
#include "gia/search.hpp"

namespace gia::exp {

// Flat "key = value" configuration with '#' comments. Only known keys are
// accepted; unset keys resolve to their defaults.
class KvConfig {
 public:
  struct Key {
    std::string name;
    std::string default_value;
    std::string help;
  };
  static const std::vector<Key>& keys();

  static KvConfig parse(const std::string& text, const std::string& origin = "<config>");
  static KvConfig load(const std::string& path);

  void set(const std::string& key, const std::string& value);
  bool is_set(const std::string& key) const { return values_.count(key) != 0; }
  std::string get(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::string> get_list(const std::string& key) const;

  // Every key with its resolved value, sorted by name.
  std::map<std::string, std::string> resolved() const;
  std::string dump() const;

 private:
  std::map<std::string, std::string> values_;
};

enum class DatasetKind { Synthetic, ImageDir, Cifar };

struct DatasetSource {
  DatasetKind kind = DatasetKind::Synthetic;
  std::string path, labels_file;
  data::SyntheticSpec synthetic;
};

struct ExperimentConfig {
  std::string preset;
  fed::SharingPolicy policy;
  attack::AttackConfig attack;
  std::size_t aux_batches = 5;
  search::SearchSpace space;
  search::PruneRule prune;
  std::size_t n_trials = 100;
  std::size_t jobs = 1;
  DatasetSource dataset;
  std::size_t num_classes = 10;
  std::size_t batch_size = 4;
  std::size_t batch_index = 0;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::size_t pretrain_steps = 0;
  double pretrain_lr = 0.05;
  std::vector<std::string> matrix_presets;
  std::size_t matrix_trials = 20;
  std::vector<std::size_t> sweep_sizes;
  std::size_t sweep_trials = 4;
  KvConfig source;  // for embedding in artifacts

  static ExperimentConfig from(const KvConfig& kv);
};

const std::vector<std::string>& preset_names();
nn::ModelConfig preset_config(const std::string& name, std::size_t channels, std::size_t height, std::size_t width,
                              std::size_t num_classes);

// Progress messages from long-running commands.
void set_log_sink(std::function<void(const std::string&)> sink);

// Dataset, fitted normalization and (optionally pretrained) client model.
struct Scenario {
  data::Dataset dataset;
  Normalization norm;
  nn::BuiltModel model;
  nn::RunningStats running;
};

Scenario make_scenario(const ExperimentConfig& cfg, const std::string& preset);

// Client batches of the attack pool followed by the server's auxiliary batches.
struct BatchPlan {
  std::vector<nn::Batch> pool;
  std::vector<nn::Batch> aux;
};
BatchPlan plan_batches(const ExperimentConfig& cfg, const Scenario& s, std::size_t batch_size);

// Mean best-assignment SSIM of 20 seeded random candidates against `truth`.
double random_baseline(const nn::Batch& truth, const Normalization& norm, std::uint64_t seed);
constexpr std::size_t kBaselineSamples = 20;
constexpr double kSuccessMargin = 0.3;

void pretrain(Scenario& s, std::size_t steps, double lr, std::size_t batch_size, std::uint64_t seed);

// Model file: architecture fields, parameters, running statistics and
// normalization constants.
fed::Container encode_model(const Scenario& s);
Scenario decode_model(const fed::Container& c);

struct ClientArtifacts {
  std::string update_path, truth_path, model_path;
};
ClientArtifacts cmd_client(const ExperimentConfig& cfg);

struct AttackOutcome {
  attack::AttackResult result;
  std::optional<metrics::Assignment> score;
  std::vector<std::string> images;
};
AttackOutcome cmd_attack(const ExperimentConfig& cfg, const std::string& update_path, const std::string& model_path,
                         const std::optional<std::string>& truth_path);

enum class Setting { NoStats, StatsShared, Inference };
const char* setting_name(Setting s);
constexpr Setting kSettings[] = {Setting::NoStats, Setting::StatsShared, Setting::Inference};

struct CellSpec {
  fed::SharingPolicy policy;
  attack::StatSource source;
};
CellSpec cell_spec(Setting s);

struct CellReport {
  std::string preset;
  Setting setting = Setting::NoStats;
  std::size_t n_trials = 0;
  std::uint64_t search_seed = 0;
  std::size_t scored = 0, diverged = 0, pruned = 0;
  std::optional<double> best_ssim, mean_ssim;
  std::optional<std::size_t> best_trial, best_batch;
  std::vector<double> baselines;  // per pool batch
  std::optional<double> baseline;  // of the best trial's batch
  bool success = false;
  std::string error;
  std::vector<search::TrialRecord> records;
};

// Search over one preset x setting cell. Images of the best trial go to
// `image_dir` when nonempty.
CellReport run_cell(const ExperimentConfig& cfg, const std::string& preset, Setting setting, std::size_t n_trials,
                    std::uint64_t search_seed, const std::string& image_dir = "");

struct MatrixReport {
  std::vector<CellReport> cells;  // preset-major, settings in kSettings order
  std::string json, markdown;
  const CellReport& cell(const std::string& preset, Setting s) const;
};
MatrixReport cmd_matrix(const ExperimentConfig& cfg);

CellReport cmd_search(const ExperimentConfig& cfg);

struct SweepPoint {
  std::size_t batch_size = 0;
  CellReport cell;
  double seconds = 0.0;
};
std::vector<SweepPoint> cmd_batchsweep(const ExperimentConfig& cfg);

struct SelftestItem {
  std::string name;
  bool pass = false;
  std::string detail;
};
std::vector<SelftestItem> selftest();

}  // namespace gia::exp
