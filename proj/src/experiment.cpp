#include "gia/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "gia/errors.hpp"
#include "gia/metrics.hpp"
#include "gia/rng.hpp"
#include "json.hpp"

namespace gia::exp {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::mutex log_mu;
std::function<void(const std::string&)> log_sink;

void log(const std::string& msg) {
  std::lock_guard lk(log_mu);
  if (log_sink) log_sink(msg);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool known_key(const std::string& key) {
  const auto& ks = KvConfig::keys();
  return std::any_of(ks.begin(), ks.end(), [&](const KvConfig::Key& k) { return k.name == key; });
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write '" + path + "'");
  out << text;
  if (!out) throw RuntimeFailure("write to '" + path + "' failed");
}

std::string ensure_dir(const std::string& dir) {
  if (dir.empty()) throw PreconditionError("output directory is empty");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw RuntimeFailure("cannot create '" + dir + "': " + ec.message());
  return dir;
}

std::string join(const std::string& dir, const std::string& file) { return (fs::path(dir) / file).string(); }

json opt_json(const std::optional<double>& v) {
  return v && std::isfinite(*v) ? json(*v) : json(nullptr);
}
json opt_json(const std::optional<std::size_t>& v) { return v ? json(*v) : json(nullptr); }
json finite_json(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json config_json(const ExperimentConfig& cfg) {
  json j = json::object();
  for (const auto& [k, v] : cfg.source.resolved()) j[k] = v;
  return j;
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

std::string fmt(double v, int digits = 3) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

nn::Mode parse_mode(const std::string& s) {
  if (s == "training" || s == "train") return nn::Mode::Training;
  if (s == "inference") return nn::Mode::Inference;
  throw PreconditionError("mode must be training or inference, got '" + s + "'");
}

Tensor labels_tensor(const std::vector<std::size_t>& labels) {
  Tensor t({labels.size()});
  for (std::size_t i = 0; i < labels.size(); ++i) t[i] = static_cast<double>(labels[i]);
  return t;
}

std::vector<std::size_t> tensor_labels(const Tensor& t) {
  std::vector<std::size_t> out;
  for (double v : t.storage()) {
    if (!(v >= 0.0) || v != std::floor(v)) throw PreconditionError("label entries must be nonnegative integers");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

Tensor vec_tensor(const std::vector<double>& v) { return Tensor({v.size()}, v); }

data::Dataset load_dataset(const ExperimentConfig& cfg) {
  switch (cfg.dataset.kind) {
    case DatasetKind::Synthetic: return data::synthetic_shapes(cfg.dataset.synthetic, derive_seed(cfg.seed, 101));
    case DatasetKind::ImageDir: return data::read_image_dir(cfg.dataset.path, cfg.dataset.labels_file);
    case DatasetKind::Cifar: return data::read_cifar_binary(cfg.dataset.path);
  }
  throw PreconditionError("unknown dataset kind");
}

std::size_t preset_index(const std::string& name) {
  const auto& names = preset_names();
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw PreconditionError("unknown preset '" + name + "'");
  return static_cast<std::size_t>(it - names.begin());
}

std::vector<Tensor> split_images(const Tensor& batch) {
  std::vector<Tensor> out;
  for (std::size_t n = 0; n < batch.dim(0); ++n) out.push_back(batch_item(batch, n));
  return out;
}

// Writes recon_<i>.ppm per image and, with a truth batch, a panel whose top row
// holds the originals matched to each reconstruction.
std::vector<std::string> write_images(const std::string& dir, const Tensor& recon_pixels,
                                      const std::optional<Tensor>& truth_pixels,
                                      const std::optional<metrics::Assignment>& score) {
  std::vector<std::string> paths;
  const auto recon = split_images(recon_pixels);
  for (std::size_t i = 0; i < recon.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "recon_%02zu.ppm", i);
    paths.push_back(join(dir, name));
    data::write_ppm(paths.back(), data::to_ppm(recon[i]));
  }
  if (truth_pixels && score && recon[0].dim(0) == 3) {
    const auto truth = split_images(*truth_pixels);
    std::vector<Tensor> top;
    for (std::size_t i = 0; i < recon.size(); ++i) top.push_back(truth[score->permutation[i]]);
    paths.push_back(join(dir, "panel.ppm"));
    data::write_ppm(paths.back(), data::panel(top, recon));
  }
  return paths;
}

}  // namespace

// ---------------------------------------------------------------- config

const std::vector<KvConfig::Key>& KvConfig::keys() {
  static const std::vector<Key> k = {
      {"preset", "preact_wide", "model preset"},
      {"mode", "training", "client BatchNorm mode: training | inference"},
      {"share_stats", "true", "client shares running statistics before/after the step"},
      {"stat_source", "none", "attack statistic targets: recovered | proxy | fixed | none"},
      {"batch_size", "4", "client batch size B"},
      {"batch_index", "0", "which pool batch the client command uses"},
      {"seed", "0", "master seed"},
      {"out", "out", "output directory"},
      {"dataset", "synthetic", "synthetic | image_dir | cifar"},
      {"dataset_path", "", "image directory or CIFAR binary file"},
      {"labels_file", "", "labels for image_dir: '<file> <label>' lines"},
      {"synthetic_count", "64", "synthetic dataset size"},
      {"image_size", "32", "synthetic image height and width"},
      {"synthetic_noise", "0.08", "synthetic background noise amplitude"},
      {"num_classes", "10", "classifier outputs"},
      {"pretrain_steps", "0", "SGD steps on the client model before the attacked step"},
      {"pretrain_lr", "0.05", "pretraining learning rate"},
      {"lambda_tv", "1e-4", "attack TV weight"},
      {"lambda_bn", "1e-2", "attack BatchNorm regularizer weight"},
      {"learning_rate", "0.1", "attack Adam step size"},
      {"iterations", "500", "attack iterations"},
      {"top_fraction", "1", "fraction of largest-change weights compared (1 = all)"},
      {"smoothing", "false", "3x3 median every 500 iterations"},
      {"init_seed", "0", "attack initialization seed"},
      {"aux_batches", "5", "auxiliary batches probed by the proxy attack"},
      {"proxy_selection", "discrepancy", "proxy candidate choice: discrepancy | oracle_ssim"},
      {"n_trials", "100", "search trials"},
      {"batch_pool", "5", "candidate batches in the search"},
      {"lambda_bn_min", "1e-4", ""},
      {"lambda_bn_max", "1e1", ""},
      {"lambda_tv_min", "1e-6", ""},
      {"lambda_tv_max", "1e0", ""},
      {"learning_rate_min", "1e-3", ""},
      {"learning_rate_max", "1e0", ""},
      {"grad_compare", "1,0.5,0.25", "top fractions searched"},
      {"smoothing_choices", "on,off", "smoothing values searched"},
      {"prune", "false", "median-stopping prune rule"},
      {"jobs", "1", "parallel workers"},
      {"matrix_presets", "preact_wide,postact_wide,postact_standard,deep_narrow_noskip", "matrix rows"},
      {"matrix_trials", "20", "search trials per matrix cell"},
      {"sweep_sizes", "1,2,4,8", "batch sizes for batchsweep"},
      {"sweep_trials", "4", "search trials per batchsweep point"},
  };
  return k;
}

KvConfig KvConfig::parse(const std::string& text, const std::string& origin) {
  KvConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw PreconditionError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    try {
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const PreconditionError& e) {
      throw PreconditionError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

KvConfig KvConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw PreconditionError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

void KvConfig::set(const std::string& key, const std::string& value) {
  if (!known_key(key)) throw PreconditionError("unknown config key '" + key + "'");
  values_[key] = value;
}

std::string KvConfig::get(const std::string& key) const {
  if (auto it = values_.find(key); it != values_.end()) return it->second;
  for (const auto& k : keys())
    if (k.name == key) return k.default_value;
  throw PreconditionError("unknown config key '" + key + "'");
}

double KvConfig::get_double(const std::string& key) const {
  const std::string v = get(key);
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || !std::isfinite(d)) throw PreconditionError(key + " must be a number, got '" + v + "'");
  return d;
}

std::uint64_t KvConfig::get_u64(const std::string& key) const {
  const std::string v = get(key);
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size()) {
    throw PreconditionError(key + " must be a nonnegative integer, got '" + v + "'");
  }
  return out;
}

std::size_t KvConfig::get_size(const std::string& key) const { return static_cast<std::size_t>(get_u64(key)); }

bool KvConfig::get_bool(const std::string& key) const {
  const std::string v = get(key);
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  throw PreconditionError(key + " must be a boolean, got '" + v + "'");
}

std::vector<std::string> KvConfig::get_list(const std::string& key) const {
  std::vector<std::string> out;
  std::stringstream ss(get(key));
  std::string item;
  while (std::getline(ss, item, ','))
    if (!trim(item).empty()) out.push_back(trim(item));
  return out;
}

std::map<std::string, std::string> KvConfig::resolved() const {
  std::map<std::string, std::string> out;
  for (const auto& k : keys()) out[k.name] = get(k.name);
  return out;
}

std::string KvConfig::dump() const {
  std::string s;
  for (const auto& [k, v] : resolved()) s += k + " = " + v + "\n";
  return s;
}

ExperimentConfig ExperimentConfig::from(const KvConfig& kv) {
  ExperimentConfig c;
  c.source = kv;
  c.preset = kv.get("preset");
  preset_index(c.preset);
  c.policy.mode = parse_mode(kv.get("mode"));
  c.policy.share_running_stats = kv.get_bool("share_stats");

  auto& a = c.attack;
  a.stat_source = attack::parse_stat_source(kv.get("stat_source"));
  a.lambda_tv = kv.get_double("lambda_tv");
  a.lambda_bn = kv.get_double("lambda_bn");
  a.learning_rate = kv.get_double("learning_rate");
  a.iterations = kv.get_size("iterations");
  a.top_fraction = kv.get_double("top_fraction");
  a.smoothing = kv.get_bool("smoothing");
  a.init_seed = kv.get_u64("init_seed");
  const std::string sel = kv.get("proxy_selection");
  if (sel == "discrepancy") a.proxy_selection = attack::ProxySelection::Discrepancy;
  else if (sel == "oracle_ssim") a.proxy_selection = attack::ProxySelection::OracleSsim;
  else throw PreconditionError("proxy_selection must be discrepancy or oracle_ssim");
  {
    // auxiliary batches are attached later, when the server samples them
    attack::AttackConfig check = a;
    if (check.stat_source == attack::StatSource::Proxy) check.stat_source = attack::StatSource::None;
    check.validate();
  }
  c.aux_batches = kv.get_size("aux_batches");

  c.space.lambda_bn = {kv.get_double("lambda_bn_min"), kv.get_double("lambda_bn_max")};
  c.space.lambda_tv = {kv.get_double("lambda_tv_min"), kv.get_double("lambda_tv_max")};
  c.space.learning_rate = {kv.get_double("learning_rate_min"), kv.get_double("learning_rate_max")};
  c.space.grad_compare.clear();
  for (const auto& f : kv.get_list("grad_compare")) {
    KvConfig tmp;
    tmp.set("top_fraction", f);
    c.space.grad_compare.push_back(tmp.get_double("top_fraction"));
  }
  c.space.smoothing.clear();
  for (const auto& s : kv.get_list("smoothing_choices")) {
    KvConfig tmp;
    tmp.set("smoothing", s);
    c.space.smoothing.push_back(tmp.get_bool("smoothing"));
  }
  c.space.batch_pool = kv.get_size("batch_pool");
  c.space.validate();
  c.prune.enabled = kv.get_bool("prune");
  c.n_trials = kv.get_size("n_trials");
  c.jobs = kv.get_size("jobs");
  if (c.n_trials == 0 || c.jobs == 0) throw PreconditionError("n_trials and jobs must be at least 1");

  const std::string ds = kv.get("dataset");
  if (ds == "synthetic") c.dataset.kind = DatasetKind::Synthetic;
  else if (ds == "image_dir") c.dataset.kind = DatasetKind::ImageDir;
  else if (ds == "cifar") c.dataset.kind = DatasetKind::Cifar;
  else throw PreconditionError("dataset must be synthetic, image_dir or cifar");
  c.dataset.path = kv.get("dataset_path");
  c.dataset.labels_file = kv.get("labels_file");
  if (c.dataset.kind != DatasetKind::Synthetic && c.dataset.path.empty()) {
    throw PreconditionError("dataset_path is required for dataset = " + ds);
  }
  c.dataset.synthetic.count = kv.get_size("synthetic_count");
  c.dataset.synthetic.height = c.dataset.synthetic.width = kv.get_size("image_size");
  c.dataset.synthetic.noise = kv.get_double("synthetic_noise");

  c.num_classes = kv.get_size("num_classes");
  c.batch_size = kv.get_size("batch_size");
  if (c.batch_size == 0) throw PreconditionError("batch_size must be at least 1");
  c.batch_index = kv.get_size("batch_index");
  c.seed = kv.get_u64("seed");
  c.out_dir = kv.get("out");
  c.pretrain_steps = kv.get_size("pretrain_steps");
  c.pretrain_lr = kv.get_double("pretrain_lr");
  c.matrix_presets = kv.get_list("matrix_presets");
  for (const auto& p : c.matrix_presets) preset_index(p);
  c.matrix_trials = kv.get_size("matrix_trials");
  for (const auto& s : kv.get_list("sweep_sizes")) {
    KvConfig tmp;
    tmp.set("batch_size", s);
    c.sweep_sizes.push_back(tmp.get_size("batch_size"));
    if (c.sweep_sizes.back() == 0) throw PreconditionError("sweep sizes must be positive");
  }
  c.sweep_trials = kv.get_size("sweep_trials");
  return c;
}

// ---------------------------------------------------------------- presets

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"preact_wide", "postact_wide", "postact_standard",
                                                 "deep_narrow_noskip"};
  return names;
}

nn::ModelConfig preset_config(const std::string& name, std::size_t channels, std::size_t height, std::size_t width,
                              std::size_t num_classes) {
  nn::ModelConfig m;
  m.channels = channels;
  m.height = height;
  m.width = width;
  m.num_classes = num_classes;
  switch (preset_index(name)) {
    case 0:
      m.block_style = nn::BlockStyle::PreActivation;
      m.width_multiplier = 2;
      break;
    case 1:
      m.block_style = nn::BlockStyle::PostActivation;
      m.width_multiplier = 2;
      break;
    case 2:
      m.block_style = nn::BlockStyle::PostActivation;
      m.width_multiplier = 1;
      break;
    case 3:
      m.block_style = nn::BlockStyle::PostActivation;
      m.depth = 6;
      m.stage_depth = 2;
      m.base_width = 4;
      m.skip_connections = false;
      break;
  }
  m.validate();
  return m;
}

void set_log_sink(std::function<void(const std::string&)> sink) {
  std::lock_guard lk(log_mu);
  log_sink = std::move(sink);
}

// ---------------------------------------------------------------- scenario

Scenario make_scenario(const ExperimentConfig& cfg, const std::string& preset) {
  data::Dataset ds = load_dataset(cfg);
  const Shape shape = ds.pixels.shape();
  for (auto l : ds.labels)
    if (l >= cfg.num_classes) throw PreconditionError("dataset label " + std::to_string(l) + " exceeds num_classes");
  const Normalization norm = Normalization::fit(ds.pixels);
  auto model = nn::build_model(preset_config(preset, shape[1], shape[2], shape[3], cfg.num_classes), derive_seed(cfg.seed, 102));
  auto running = model.architecture.initial_running_stats();
  Scenario s{std::move(ds), norm, std::move(model), std::move(running)};
  if (cfg.pretrain_steps > 0) pretrain(s, cfg.pretrain_steps, cfg.pretrain_lr, cfg.batch_size, derive_seed(cfg.seed, 103));
  return s;
}

BatchPlan plan_batches(const ExperimentConfig& cfg, const Scenario& s, std::size_t batch_size) {
  const std::size_t pool = cfg.space.batch_pool, aux = cfg.aux_batches;
  const auto groups = data::sample_batches(s.dataset.size(), batch_size, pool + aux, derive_seed(cfg.seed, 104));
  BatchPlan plan;
  for (std::size_t k = 0; k < groups.size(); ++k) {
    (k < pool ? plan.pool : plan.aux).push_back(data::make_batch(s.dataset, groups[k], s.norm));
  }
  return plan;
}

double random_baseline(const nn::Batch& truth, const Normalization& norm, std::uint64_t seed) {
  const Tensor truth_pixels = norm.denormalize(truth.images);
  double total = 0.0;
  for (std::size_t k = 0; k < kBaselineSamples; ++k) {
    const Tensor noise = attack::initial_candidate(truth.images.shape(), derive_seed(seed, k));
    total += metrics::best_assignment_ssim(norm.denormalize(norm.clamp(noise)), truth_pixels).mean_ssim;
  }
  return total / static_cast<double>(kBaselineSamples);
}

void pretrain(Scenario& s, std::size_t steps, double lr, std::size_t batch_size, std::uint64_t seed) {
  if (!(lr > 0.0)) throw PreconditionError("pretrain_lr must be positive");
  if (batch_size > s.dataset.size()) throw PreconditionError("pretraining batch exceeds the dataset");
  Rng rng(seed);
  const double m = s.model.architecture.config().bn_momentum;
  for (std::size_t step = 0; step < steps; ++step) {
    const auto idx = data::sample_batches(s.dataset.size(), batch_size, 1, rng.engine()())[0];
    const auto batch = data::make_batch(s.dataset, idx, s.norm);
    auto lg = nn::loss_and_gradients(s.model.architecture, s.model.params, batch, nn::Mode::Training, s.running);
    for (std::size_t p = 0; p < lg.gradients.size(); ++p) {
      auto& w = s.model.params.entries()[p].value;
      for (std::size_t i = 0; i < w.numel(); ++i) w[i] -= lr * lg.gradients[p].value[i];
    }
    s.running = fed::advance_running_stats(s.running, lg.batch_stats, m);
  }
}

fed::Container encode_model(const Scenario& s) {
  fed::Container c;
  const auto& m = s.model.architecture.config();
  c.add_scalar("model/block_style", m.block_style == nn::BlockStyle::PreActivation ? 0.0 : 1.0);
  c.add_scalar("model/depth", static_cast<double>(m.depth));
  c.add_scalar("model/width_multiplier", static_cast<double>(m.width_multiplier));
  c.add_scalar("model/skip_connections", m.skip_connections ? 1.0 : 0.0);
  c.add_scalar("model/channels", static_cast<double>(m.channels));
  c.add_scalar("model/height", static_cast<double>(m.height));
  c.add_scalar("model/width", static_cast<double>(m.width));
  c.add_scalar("model/num_classes", static_cast<double>(m.num_classes));
  c.add_scalar("model/base_width", static_cast<double>(m.base_width));
  c.add_scalar("model/stage_depth", static_cast<double>(m.stage_depth));
  c.add_scalar("model/bn_momentum", m.bn_momentum);
  c.add_scalar("model/bn_epsilon", m.bn_epsilon);
  for (const auto& p : s.model.params.entries()) c.add("param/" + p.name, p.value);
  fed::encode_running_stats(c, "running/", s.running);
  c.add("norm/mean", vec_tensor(s.norm.mean));
  c.add("norm/std", vec_tensor(s.norm.stddev));
  return c;
}

Scenario decode_model(const fed::Container& c) {
  auto count = [&](const std::string& k) {
    const double v = c.scalar(k);
    if (!(v >= 0.0) || v != std::floor(v)) throw PreconditionError(k + " must be a nonnegative integer");
    return static_cast<std::size_t>(v);
  };
  nn::ModelConfig m;
  m.block_style = c.scalar("model/block_style") == 0.0 ? nn::BlockStyle::PreActivation : nn::BlockStyle::PostActivation;
  m.depth = count("model/depth");
  m.width_multiplier = count("model/width_multiplier");
  m.skip_connections = c.scalar("model/skip_connections") != 0.0;
  m.channels = count("model/channels");
  m.height = count("model/height");
  m.width = count("model/width");
  m.num_classes = count("model/num_classes");
  m.base_width = count("model/base_width");
  m.stage_depth = count("model/stage_depth");
  m.bn_momentum = c.scalar("model/bn_momentum");
  m.bn_epsilon = c.scalar("model/bn_epsilon");
  m.validate();
  Scenario s{{}, {}, {nn::Architecture(m), {}}, {}};
  for (const auto& [name, shape] : s.model.architecture.parameter_layout()) {
    const Tensor& t = c.get("param/" + name);
    if (t.shape() != shape) throw ShapeError("model file parameter '" + name + "' has shape " + shape_str(t.shape()));
    s.model.params.add(name, t);
  }
  s.running = fed::decode_running_stats(c, "running/");
  s.norm.mean = c.get("norm/mean").storage();
  s.norm.stddev = c.get("norm/std").storage();
  s.norm.validate();
  return s;
}

// ---------------------------------------------------------------- client / attack

ClientArtifacts cmd_client(const ExperimentConfig& cfg) {
  Scenario s = make_scenario(cfg, cfg.preset);
  const BatchPlan plan = plan_batches(cfg, s, cfg.batch_size);
  if (cfg.batch_index >= plan.pool.size()) throw PreconditionError("batch_index exceeds the batch pool");
  const nn::Batch& batch = plan.pool[cfg.batch_index];
  const auto update = fed::client_step(s.model.architecture, s.model.params, batch, cfg.policy, s.running);

  ensure_dir(cfg.out_dir);
  ClientArtifacts out{join(cfg.out_dir, "update.giau"), join(cfg.out_dir, "truth.giau"), join(cfg.out_dir, "model.giau")};
  fed::save_container(out.update_path, fed::encode_update(update));
  fed::Container truth;
  truth.add("truth/images", batch.images);
  truth.add("truth/labels", labels_tensor(batch.labels));
  truth.add("norm/mean", vec_tensor(s.norm.mean));
  truth.add("norm/std", vec_tensor(s.norm.stddev));
  truth.add_scalar("meta/batch_index", static_cast<double>(cfg.batch_index));
  fed::save_container(out.truth_path, truth);
  fed::save_container(out.model_path, encode_model(s));
  write_text(join(cfg.out_dir, "client.json"), json{{"config", config_json(cfg)},
                                                    {"update", out.update_path},
                                                    {"truth", out.truth_path},
                                                    {"model", out.model_path},
                                                    {"batch_size", update.batch_size},
                                                    {"mode", nn::mode_name(update.mode)},
                                                    {"share_stats", update.has_stats()}}
                                                   .dump(2) +
                                                   "\n");
  log("client: wrote " + out.update_path);
  return out;
}

AttackOutcome cmd_attack(const ExperimentConfig& cfg, const std::string& update_path, const std::string& model_path,
                         const std::optional<std::string>& truth_path) {
  const auto update = fed::decode_update(fed::load_container(update_path));
  const Scenario model = decode_model(fed::load_container(model_path));
  std::optional<nn::Batch> truth;
  if (truth_path) {
    const auto c = fed::load_container(*truth_path);
    truth = nn::Batch{c.get("truth/images"), tensor_labels(c.get("truth/labels"))};
  }

  attack::AttackConfig config = cfg.attack;
  if (config.stat_source == attack::StatSource::Proxy) {
    Scenario server{load_dataset(cfg), model.norm, {nn::Architecture(model.model.architecture.config()), {}}, {}};
    config.aux_batches = plan_batches(cfg, server, update.batch_size).aux;
  }
  if (config.proxy_selection == attack::ProxySelection::OracleSsim) {
    if (!truth) throw PreconditionError("oracle_ssim proxy selection needs --truth");
    config.oracle_truth = truth;
  }

  const attack::AttackModel am{&model.model.architecture, &model.model.params, &model.running, model.norm};
  const std::size_t every = std::max<std::size_t>(1, config.iterations / 10);
  auto hook = [&](std::size_t it, double d) {
    if ((it + 1) % every == 0) log("attack: iteration " + std::to_string(it + 1) + " discrepancy " + fmt(d, 6));
    return true;
  };
  AttackOutcome out;
  out.result = attack::run_attack(update, am, config, hook);
  const Tensor recon_pixels = model.norm.denormalize(out.result.reconstruction);
  std::optional<Tensor> truth_pixels;
  if (truth) {
    truth_pixels = model.norm.denormalize(truth->images);
    out.score = metrics::best_assignment_ssim(recon_pixels, *truth_pixels);
    out.result.ssim_per_image = out.score->per_image;
  }

  ensure_dir(cfg.out_dir);
  out.images = write_images(cfg.out_dir, recon_pixels, truth_pixels, out.score);
  fed::Container rc;
  rc.add("recon/images", out.result.reconstruction);
  fed::save_container(join(cfg.out_dir, "reconstruction.giau"), rc);

  json j;
  j["config"] = config_json(cfg);
  j["update"] = update_path;
  j["model"] = model_path;
  j["stat_source"] = attack::stat_source_name(config.stat_source);
  j["init_seed"] = config.init_seed;
  j["iterations"] = config.iterations;
  j["initial_discrepancy"] = finite_json(out.result.discrepancy_trace.front());
  j["final_discrepancy"] = finite_json(out.result.final_discrepancy);
  j["proxy_candidate"] = opt_json(out.result.proxy_candidate);
  json pc = json::array();
  for (double d : out.result.proxy_candidate_discrepancy) pc.push_back(finite_json(d));
  j["proxy_candidate_discrepancy"] = pc;
  if (out.score) {
    j["ssim"] = out.score->mean_ssim;
    j["ssim_per_image"] = out.score->per_image;
    j["permutation"] = out.score->permutation;
    j["psnr"] = finite_json(metrics::psnr(recon_pixels, *truth_pixels));
    j["random_baseline"] = random_baseline(*truth, model.norm, derive_seed(cfg.seed, 106));
  }
  j["images"] = out.images;
  j["discrepancy_trace"] = out.result.discrepancy_trace;
  j["loss_trace"] = out.result.loss_trace;
  write_text(join(cfg.out_dir, "result.json"), j.dump(2) + "\n");
  log("attack: final discrepancy " + fmt(out.result.final_discrepancy, 6) +
      (out.score ? ", ssim " + fmt(out.score->mean_ssim) : std::string()));
  return out;
}

// ---------------------------------------------------------------- search cells

const char* setting_name(Setting s) {
  switch (s) {
    case Setting::NoStats: return "no-stats";
    case Setting::StatsShared: return "stats-shared";
    case Setting::Inference: return "inference";
  }
  return "?";
}

CellSpec cell_spec(Setting s) {
  switch (s) {
    case Setting::NoStats: return {{nn::Mode::Training, false}, attack::StatSource::Proxy};
    case Setting::StatsShared: return {{nn::Mode::Training, true}, attack::StatSource::Recovered};
    case Setting::Inference: return {{nn::Mode::Inference, false}, attack::StatSource::Fixed};
  }
  throw PreconditionError("unknown setting");
}

CellReport run_cell(const ExperimentConfig& cfg, const std::string& preset, Setting setting, std::size_t n_trials,
                    std::uint64_t search_seed, const std::string& image_dir) {
  CellReport cell;
  cell.preset = preset;
  cell.setting = setting;
  cell.n_trials = n_trials;
  cell.search_seed = search_seed;
  try {
    const CellSpec spec = cell_spec(setting);
    const Scenario s = make_scenario(cfg, preset);
    const BatchPlan plan = plan_batches(cfg, s, cfg.batch_size);
    search::AttackProblem problem;
    problem.model = {&s.model.architecture, &s.model.params, &s.running, s.norm};
    for (const auto& b : plan.pool) {
      problem.pool.push_back({fed::client_step(s.model.architecture, s.model.params, b, spec.policy, s.running), b});
    }
    problem.base = cfg.attack;
    problem.base.stat_source = spec.source;
    if (spec.source == attack::StatSource::Proxy) problem.base.aux_batches = plan.aux;
    for (std::size_t k = 0; k < plan.pool.size(); ++k) {
      cell.baselines.push_back(random_baseline(plan.pool[k], s.norm, derive_seed(search_seed, 1000 + k)));
    }

    search::SearchOptions opt;
    opt.n_trials = n_trials;
    opt.master_seed = search_seed;
    opt.jobs = 1;
    opt.prune = cfg.prune;
    const std::string tag = preset + "/" + setting_name(setting);
    opt.on_record = [&](const search::TrialRecord& r) {
      log(tag + ": trial " + std::to_string(r.index + 1) + "/" + std::to_string(n_trials) +
          (r.scored() ? " ssim " + fmt(*r.ssim) : r.diverged ? " diverged" : " pruned"));
    };
    std::optional<search::SearchResult> res;
    try {
      res = search::run_search(cfg.space, opt, problem);
      cell.records = res->records;
    } catch (const search::SearchFailed& e) {
      cell.records = e.records;
      cell.error = e.what();
    }
    double sum = 0.0;
    for (const auto& r : cell.records) {
      if (r.scored()) {
        ++cell.scored;
        sum += *r.ssim;
      }
      cell.diverged += r.diverged;
      cell.pruned += r.pruned;
    }
    if (cell.scored) cell.mean_ssim = sum / static_cast<double>(cell.scored);
    if (res) {
      const auto& best = res->best_record();
      cell.best_ssim = best.ssim;
      cell.best_trial = best.index;
      cell.best_batch = best.sample.batch_id;
      cell.baseline = cell.baselines[best.sample.batch_id];
      cell.success = *cell.best_ssim >= *cell.baseline + kSuccessMargin;
      if (!image_dir.empty()) {
        const auto config = search::trial_config(problem.base, best.sample, best.attack_seed);
        const auto& entry = problem.pool[best.sample.batch_id];
        auto c = config;
        if (c.proxy_selection == attack::ProxySelection::OracleSsim) c.oracle_truth = entry.truth;
        const auto r = attack::run_attack(entry.update, problem.model, c);
        const Tensor rp = s.norm.denormalize(r.reconstruction), tp = s.norm.denormalize(entry.truth.images);
        ensure_dir(image_dir);
        write_images(image_dir, rp, tp, metrics::best_assignment_ssim(rp, tp));
      }
    }
  } catch (const std::exception& e) {
    cell.error = e.what();
  }
  return cell;
}

namespace {

json cell_json(const CellReport& c) {
  const CellSpec spec = cell_spec(c.setting);
  json j;
  j["preset"] = c.preset;
  j["setting"] = setting_name(c.setting);
  j["mode"] = nn::mode_name(spec.policy.mode);
  j["share_stats"] = spec.policy.share_running_stats;
  j["stat_source"] = attack::stat_source_name(spec.source);
  j["n_trials"] = c.n_trials;
  j["search_seed"] = c.search_seed;
  j["scored"] = c.scored;
  j["diverged"] = c.diverged;
  j["pruned"] = c.pruned;
  j["best_ssim"] = opt_json(c.best_ssim);
  j["mean_ssim"] = opt_json(c.mean_ssim);
  j["best_trial"] = opt_json(c.best_trial);
  j["best_batch"] = opt_json(c.best_batch);
  j["random_baseline"] = opt_json(c.baseline);
  j["random_baseline_per_batch"] = c.baselines;
  j["threshold"] = c.baseline ? json(*c.baseline + kSuccessMargin) : json(nullptr);
  j["verdict"] = c.success ? "✓" : "×";
  j["error"] = c.error.empty() ? json(nullptr) : json(c.error);
  json trials = json::array();
  for (const auto& r : c.records) {
    trials.push_back({{"trial", r.index},
                      {"batch_id", r.sample.batch_id},
                      {"attack_seed", r.attack_seed},
                      {"lambda_bn", r.sample.lambda_bn},
                      {"lambda_tv", r.sample.lambda_tv},
                      {"learning_rate", r.sample.learning_rate},
                      {"top_fraction", r.sample.top_fraction},
                      {"smoothing", r.sample.smoothing},
                      {"ssim", opt_json(r.ssim)},
                      {"final_discrepancy", finite_json(r.final_discrepancy)},
                      {"diverged", r.diverged},
                      {"pruned", r.pruned}});
  }
  j["trials"] = trials;
  return j;
}

std::uint64_t cell_seed(std::uint64_t master, const std::string& preset, Setting s) {
  return derive_seed(derive_seed(master, 200 + preset_index(preset)), static_cast<std::uint64_t>(s));
}

// Runs f(i) for i in [0, n) on up to `jobs` threads.
template <typename F>
void parallel_for(std::size_t n, std::size_t jobs, F f) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(jobs, n); ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) f(i);
    });
  for (auto& t : pool) t.join();
}

}  // namespace

const CellReport& MatrixReport::cell(const std::string& preset, Setting s) const {
  for (const auto& c : cells)
    if (c.preset == preset && c.setting == s) return c;
  throw PreconditionError("matrix has no cell " + preset + "/" + setting_name(s));
}

MatrixReport cmd_matrix(const ExperimentConfig& cfg) {
  if (cfg.matrix_presets.empty()) throw PreconditionError("matrix_presets is empty");
  MatrixReport rep;
  for (const auto& p : cfg.matrix_presets)
    for (Setting s : kSettings) {
      CellReport c;
      c.preset = p;
      c.setting = s;
      rep.cells.push_back(std::move(c));
    }
  parallel_for(rep.cells.size(), cfg.jobs, [&](std::size_t i) {
    const auto p = rep.cells[i].preset;
    const auto s = rep.cells[i].setting;
    rep.cells[i] = run_cell(cfg, p, s, cfg.matrix_trials, cell_seed(cfg.seed, p, s));
  });

  json j;
  j["config"] = config_json(cfg);
  j["master_seed"] = cfg.seed;
  j["success_rule"] = "best_ssim >= random_baseline + 0.3";
  json cells = json::array();
  for (const auto& c : rep.cells) cells.push_back(cell_json(c));
  j["cells"] = cells;
  rep.json = j.dump(2) + "\n";

  std::ostringstream md;
  md << "# Attack success matrix\n\n"
     << "Success: best SSIM >= random baseline + 0.3. Cells show verdict, best SSIM, mean SSIM, baseline.\n\n"
     << "| preset |";
  for (Setting s : kSettings) md << " " << setting_name(s) << " |";
  md << "\n|---|";
  for (std::size_t k = 0; k < std::size(kSettings); ++k) md << "---|";
  md << "\n";
  for (const auto& p : cfg.matrix_presets) {
    md << "| " << p << " |";
    for (Setting s : kSettings) {
      const auto& c = rep.cell(p, s);
      if (!c.best_ssim) {
        md << " × (no score" << (c.error.empty() ? "" : ": " + c.error) << ") |";
        continue;
      }
      md << " " << (c.success ? "✓" : "×") << " " << fmt(*c.best_ssim) << " / " << fmt(*c.mean_ssim) << " / "
         << fmt(*c.baseline) << " |";
    }
    md << "\n";
  }
  md << "\nmaster seed " << cfg.seed << ", " << cfg.matrix_trials << " trials per cell, batch size " << cfg.batch_size
     << ", " << cfg.attack.iterations << " iterations per attack\n";
  rep.markdown = md.str();

  ensure_dir(cfg.out_dir);
  write_text(join(cfg.out_dir, "matrix.json"), rep.json);
  write_text(join(cfg.out_dir, "matrix.md"), rep.markdown);
  log("matrix: wrote " + join(cfg.out_dir, "matrix.md"));
  return rep;
}

CellReport cmd_search(const ExperimentConfig& cfg) {
  // the configured sharing policy and stat source define the cell
  Setting setting = Setting::Inference;
  if (cfg.policy.mode == nn::Mode::Training) setting = cfg.policy.share_running_stats ? Setting::StatsShared : Setting::NoStats;
  ensure_dir(cfg.out_dir);
  ExperimentConfig c = cfg;
  const auto spec = cell_spec(setting);
  if (cfg.attack.stat_source != spec.source) {
    log("search: using stat_source " + std::string(attack::stat_source_name(spec.source)) + " for setting " +
        setting_name(setting));
  }
  CellReport cell = run_cell(c, cfg.preset, setting, cfg.n_trials, derive_seed(cfg.seed, 105), cfg.out_dir);
  std::string lines;
  for (const auto& r : cell.records) lines += search::record_json(r) + "\n";
  write_text(join(cfg.out_dir, "trials.jsonl"), lines);
  json j = cell_json(cell);
  j["config"] = config_json(cfg);
  write_text(join(cfg.out_dir, "search.json"), j.dump(2) + "\n");
  if (!cell.error.empty() && !cell.best_ssim) throw RuntimeFailure(cell.error);
  return cell;
}

std::vector<SweepPoint> cmd_batchsweep(const ExperimentConfig& cfg) {
  if (cfg.sweep_sizes.empty()) throw PreconditionError("sweep_sizes is empty");
  {
    const auto ds = load_dataset(cfg);
    for (auto b : cfg.sweep_sizes) {
      if (b * (cfg.space.batch_pool + cfg.aux_batches) > ds.size()) {
        throw PreconditionError("batch size " + std::to_string(b) + " exceeds what the " + std::to_string(ds.size()) +
                                "-image dataset can supply");
      }
    }
  }
  std::vector<SweepPoint> points;
  for (std::size_t k = 0; k < cfg.sweep_sizes.size(); ++k) {
    ExperimentConfig c = cfg;
    c.batch_size = cfg.sweep_sizes[k];
    const auto start = std::chrono::steady_clock::now();
    SweepPoint p;
    p.batch_size = c.batch_size;
    p.cell = run_cell(c, cfg.preset, Setting::NoStats, cfg.sweep_trials, derive_seed(cfg.seed, 300 + c.batch_size));
    p.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    points.push_back(std::move(p));
  }

  json j;
  j["config"] = config_json(cfg);
  json arr = json::array();
  for (const auto& p : points) {
    json e = cell_json(p.cell);
    e["batch_size"] = p.batch_size;
    e["seconds"] = p.seconds;
    arr.push_back(e);
  }
  j["points"] = arr;

  // SSIM vs B line plot on a log2 x axis
  const double W = 480, H = 320, L = 56, R = 16, T = 24, Bm = 44;
  const double xmin = std::log2(static_cast<double>(*std::min_element(cfg.sweep_sizes.begin(), cfg.sweep_sizes.end())));
  const double xmax = std::log2(static_cast<double>(*std::max_element(cfg.sweep_sizes.begin(), cfg.sweep_sizes.end())));
  auto sx = [&](std::size_t b) {
    const double span = xmax > xmin ? xmax - xmin : 1.0;
    return L + (W - L - R) * (xmax > xmin ? (std::log2(static_cast<double>(b)) - xmin) / span : 0.5);
  };
  auto sy = [&](double v) { return T + (H - T - Bm) * (1.0 - std::clamp(v, 0.0, 1.0)); };
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<line x1=\"" << L << "\" y1=\"" << H - Bm << "\" x2=\"" << W - R << "\" y2=\"" << H - Bm
      << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - Bm << "\" stroke=\"black\"/>\n";
  for (double v : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    svg << "<text x=\"" << L - 6 << "\" y=\"" << sy(v) + 4 << "\" font-size=\"11\" text-anchor=\"end\">" << fmt(v, 2)
        << "</text>\n";
  }
  std::string path;
  for (const auto& p : points) {
    svg << "<text x=\"" << sx(p.batch_size) << "\" y=\"" << H - Bm + 16 << "\" font-size=\"11\" text-anchor=\"middle\">"
        << p.batch_size << "</text>\n";
    if (!p.cell.best_ssim) continue;
    const double x = sx(p.batch_size), y = sy(*p.cell.best_ssim);
    path += (path.empty() ? "M" : " L") + fmt(x, 1) + " " + fmt(y, 1);
    svg << "<circle cx=\"" << fmt(x, 1) << "\" cy=\"" << fmt(y, 1) << "\" r=\"3\" fill=\"#1f77b4\"/>\n";
  }
  if (!path.empty()) svg << "<path d=\"" << path << "\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n";
  svg << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 8 << "\" font-size=\"12\" text-anchor=\"middle\">batch size B</text>\n"
      << "<text x=\"14\" y=\"" << (T + H - Bm) / 2 << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
      << (T + H - Bm) / 2 << ")\">best SSIM</text>\n"
      << "</svg>\n";

  ensure_dir(cfg.out_dir);
  write_text(join(cfg.out_dir, "batchsweep.json"), j.dump(2) + "\n");
  write_text(join(cfg.out_dir, "batchsweep.svg"), svg.str());
  return points;
}

// ---------------------------------------------------------------- selftest

std::vector<SelftestItem> selftest() {
  std::vector<SelftestItem> items;
  auto add = [&](std::string name, bool pass, std::string detail) { items.push_back({std::move(name), pass, std::move(detail)}); };

  nn::ModelConfig mc;
  mc.base_width = 4;
  mc.height = mc.width = 8;
  mc.num_classes = 5;
  const auto model = nn::build_model(mc, 1);
  const auto running = model.architecture.initial_running_stats();
  Tensor x = attack::initial_candidate(mc.input_shape(2), 3);
  const std::vector<std::size_t> labels{1, 3};

  for (nn::Mode mode : {nn::Mode::Training, nn::Mode::Inference}) {
    auto lg = nn::build_loss_graph(model.architecture, mode, running, 2, labels);
    auto b = lg.bind(model.params);
    b[lg.input] = x;
    double worst = ad::check_gradient(lg.graph, lg.loss, lg.input, x, b, 1e-5);
    for (std::size_t p = 0; p < lg.param_leaves.size(); ++p) {
      worst = std::max(worst, ad::check_gradient(lg.graph, lg.loss, lg.param_leaves[p],
                                                 model.params.entries()[p].value, b, 1e-5));
    }
    add(std::string("gradient check (") + nn::mode_name(mode) + ")", worst < 1e-6, "max rel err " + sci(worst));

    const auto target = nn::loss_and_gradients(model.architecture, model.params,
                                               {attack::initial_candidate(mc.input_shape(2), 4), labels}, mode, running)
                            .gradients;
    auto d = attack::cosine_discrepancy(lg.graph, lg.grads, target);
    const double err2 = ad::check_gradient(lg.graph, d, lg.input, x, b, 1e-5);
    add(std::string("second-order check (") + nn::mode_name(mode) + ")", err2 < 1e-5, "max rel err " + sci(err2));
  }

  const auto u = fed::client_step(model.architecture, model.params, {x, labels}, {nn::Mode::Training, true}, running);
  const auto rec = attack::recover_update_stats(u);
  const auto truth = nn::loss_and_gradients(model.architecture, model.params, {x, labels}, nn::Mode::Training, running);
  double rerr = 0.0;
  for (std::size_t l = 0; l < rec.size(); ++l) {
    rerr = std::max({rerr, max_abs_diff(rec[l].mean, truth.batch_stats[l].mean),
                     max_abs_diff(rec[l].var_biased, truth.batch_stats[l].var_biased)});
  }
  add("statistic recovery round trip", rerr < 1e-10, "max abs err " + sci(rerr));

  const double tv = attack::total_variation(Tensor({1, 3, 8, 8}, 0.3));
  const double rbn = attack::r_bn(truth.batch_stats, rec);
  const double self = attack::cosine_discrepancy(u.gradients, u.gradients);
  add("regularizer spot values", tv < 1e-6 && rbn < 1e-9 && std::abs(self) < 1e-12,
      "tv " + sci(tv) + ", r_bn " + sci(rbn) + ", self " + sci(self));

  std::stringstream buf;
  fed::write_container(buf, fed::encode_update(u));
  const auto back = fed::decode_update(fed::read_container(buf));
  bool same = back.gradients.size() == u.gradients.size();
  for (std::size_t i = 0; same && i < u.gradients.size(); ++i) same = back.gradients[i] == u.gradients[i];
  add("update container round trip", same && back.has_stats(), "");
  return items;
}

}  // namespace gia::exp
