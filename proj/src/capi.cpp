#include "gia/gia.h"

#include <cmath>
#include <cstring>
#include <exception>
#include <limits>
#include <mutex>
#include <new>
#include <string>

#include "gia/experiment.hpp"
#include "json.hpp"

struct gia_config {
  gia::exp::KvConfig kv;
};

struct gia_update {
  gia::fed::ClientUpdate update;
};

struct gia_model {
  gia::exp::Scenario scenario;
};

namespace {

thread_local std::string last_error;

std::mutex cb_mu;
gia_log_fn cb_fn = nullptr;
void* cb_user = nullptr;

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

template <typename F>
gia_status guard(F&& f) {
  try {
    f();
    last_error.clear();
    return GIA_OK;
  } catch (const gia::PreconditionError& e) {
    last_error = e.what();
    return GIA_PRECONDITION;
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
    return GIA_RUNTIME_FAILURE;
  } catch (const std::exception& e) {
    last_error = e.what();
    return GIA_RUNTIME_FAILURE;
  } catch (...) {
    last_error = "unknown error";
    return GIA_RUNTIME_FAILURE;
  }
}

void require(const void* p, const char* what) {
  if (!p) throw gia::PreconditionError(std::string(what) + " is null");
}

double nan() { return std::numeric_limits<double>::quiet_NaN(); }

}  // namespace

extern "C" {

const char* gia_version(void) { return "0.1.0"; }

const char* gia_last_error(void) { return last_error.c_str(); }

void gia_string_free(char* s) { std::free(s); }

void gia_set_log_callback(gia_log_fn fn, void* user) {
  {
    std::lock_guard lk(cb_mu);
    cb_fn = fn;
    cb_user = user;
  }
  if (!fn) {
    gia::exp::set_log_sink({});
    return;
  }
  gia::exp::set_log_sink([](const std::string& msg) {
    std::lock_guard lk(cb_mu);
    if (cb_fn) cb_fn(msg.c_str(), cb_user);
  });
}

gia_status gia_config_new(gia_config** out) {
  return guard([&] {
    require(out, "out");
    *out = new gia_config{};
  });
}

gia_status gia_config_load(const char* path, gia_config** out) {
  return guard([&] {
    require(path, "path");
    require(out, "out");
    *out = new gia_config{gia::exp::KvConfig::load(path)};
  });
}

gia_status gia_config_parse(const char* text, gia_config** out) {
  return guard([&] {
    require(text, "text");
    require(out, "out");
    *out = new gia_config{gia::exp::KvConfig::parse(text)};
  });
}

void gia_config_free(gia_config* cfg) { delete cfg; }

gia_status gia_config_set(gia_config* cfg, const char* key, const char* value) {
  return guard([&] {
    require(cfg, "config");
    require(key, "key");
    require(value, "value");
    cfg->kv.set(key, value);
  });
}

gia_status gia_config_get(const gia_config* cfg, const char* key, char** value) {
  return guard([&] {
    require(cfg, "config");
    require(key, "key");
    require(value, "value");
    *value = dup(cfg->kv.get(key));
  });
}

gia_status gia_config_dump(const gia_config* cfg, char** text) {
  return guard([&] {
    require(cfg, "config");
    require(text, "text");
    *text = dup(cfg->kv.dump());
  });
}

gia_status gia_config_validate(const gia_config* cfg) {
  return guard([&] {
    require(cfg, "config");
    gia::exp::ExperimentConfig::from(cfg->kv);
  });
}

size_t gia_config_key_count(void) { return gia::exp::KvConfig::keys().size(); }

const char* gia_config_key_name(size_t i) {
  const auto& k = gia::exp::KvConfig::keys();
  return i < k.size() ? k[i].name.c_str() : nullptr;
}

const char* gia_config_key_default(size_t i) {
  const auto& k = gia::exp::KvConfig::keys();
  return i < k.size() ? k[i].default_value.c_str() : nullptr;
}

const char* gia_config_key_help(size_t i) {
  const auto& k = gia::exp::KvConfig::keys();
  return i < k.size() ? k[i].help.c_str() : nullptr;
}

gia_status gia_update_load(const char* path, gia_update** out) {
  return guard([&] {
    require(path, "path");
    require(out, "out");
    *out = new gia_update{gia::fed::decode_update(gia::fed::load_container(path))};
  });
}

void gia_update_free(gia_update* u) { delete u; }

gia_status gia_update_info_get(const gia_update* u, gia_update_info* info) {
  return guard([&] {
    require(u, "update");
    require(info, "info");
    info->batch_size = u->update.batch_size;
    info->gradient_count = u->update.gradients.size();
    info->gradient_elements = 0;
    for (const auto& g : u->update.gradients) info->gradient_elements += g.value.numel();
    info->inference_mode = u->update.mode == gia::nn::Mode::Inference;
    info->has_stats = u->update.has_stats();
  });
}

gia_status gia_model_load(const char* path, gia_model** out) {
  return guard([&] {
    require(path, "path");
    require(out, "out");
    *out = new gia_model{gia::exp::decode_model(gia::fed::load_container(path))};
  });
}

void gia_model_free(gia_model* m) { delete m; }

gia_status gia_model_info_get(const gia_model* m, gia_model_info* info) {
  return guard([&] {
    require(m, "model");
    require(info, "info");
    const auto& c = m->scenario.model.architecture.config();
    info->channels = c.channels;
    info->height = c.height;
    info->width = c.width;
    info->num_classes = c.num_classes;
    info->parameter_count = m->scenario.model.params.size();
    info->parameter_elements = m->scenario.model.params.total_elements();
    info->bn_layers = m->scenario.model.architecture.bn_layers().size();
  });
}

void gia_client_result_free(gia_client_result* r) {
  if (!r) return;
  std::free(r->update_path);
  std::free(r->truth_path);
  std::free(r->model_path);
  r->update_path = r->truth_path = r->model_path = nullptr;
}

gia_status gia_cmd_client(const gia_config* cfg, gia_client_result* out) {
  return guard([&] {
    require(cfg, "config");
    const auto art = gia::exp::cmd_client(gia::exp::ExperimentConfig::from(cfg->kv));
    if (out) {
      out->update_path = dup(art.update_path);
      out->truth_path = dup(art.truth_path);
      out->model_path = dup(art.model_path);
    }
  });
}

gia_status gia_cmd_attack(const gia_config* cfg, const char* update_path, const char* model_path, const char* truth_path,
                          gia_attack_result* out) {
  return guard([&] {
    require(cfg, "config");
    require(update_path, "update path");
    require(model_path, "model path");
    std::optional<std::string> truth;
    if (truth_path) truth = truth_path;
    const auto r = gia::exp::cmd_attack(gia::exp::ExperimentConfig::from(cfg->kv), update_path, model_path, truth);
    if (out) {
      out->initial_discrepancy = r.result.discrepancy_trace.empty() ? nan() : r.result.discrepancy_trace.front();
      out->final_discrepancy = r.result.final_discrepancy;
      out->ssim = r.score ? r.score->mean_ssim : nan();
      out->image_count = r.result.reconstruction.dim(0);
    }
  });
}

gia_status gia_cmd_search(const gia_config* cfg, gia_search_result* out) {
  return guard([&] {
    require(cfg, "config");
    const auto c = gia::exp::cmd_search(gia::exp::ExperimentConfig::from(cfg->kv));
    if (out) {
      out->n_trials = c.n_trials;
      out->scored = c.scored;
      out->diverged = c.diverged;
      out->pruned = c.pruned;
      out->best_trial = c.best_trial.value_or(0);
      out->best_ssim = c.best_ssim.value_or(nan());
      out->random_baseline = c.baseline.value_or(nan());
      out->success = c.success;
    }
  });
}

gia_status gia_cmd_matrix(const gia_config* cfg, char** markdown, char** json) {
  return guard([&] {
    require(cfg, "config");
    const auto rep = gia::exp::cmd_matrix(gia::exp::ExperimentConfig::from(cfg->kv));
    if (markdown) *markdown = dup(rep.markdown);
    if (json) *json = dup(rep.json);
  });
}

gia_status gia_cmd_batchsweep(const gia_config* cfg, char** json) {
  return guard([&] {
    require(cfg, "config");
    const auto pts = gia::exp::cmd_batchsweep(gia::exp::ExperimentConfig::from(cfg->kv));
    if (json) {
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& p : pts) {
        arr.push_back({{"batch_size", p.batch_size},
                       {"best_ssim", p.cell.best_ssim ? nlohmann::json(*p.cell.best_ssim) : nlohmann::json(nullptr)},
                       {"seconds", p.seconds}});
      }
      *json = dup(arr.dump());
    }
  });
}

gia_status gia_selftest(int* all_pass, char** report) {
  return guard([&] {
    const auto items = gia::exp::selftest();
    bool ok = true;
    std::string text;
    for (const auto& it : items) {
      ok = ok && it.pass;
      text += std::string(it.pass ? "PASS " : "FAIL ") + it.name + (it.detail.empty() ? "" : ": " + it.detail) + "\n";
    }
    if (all_pass) *all_pass = ok;
    if (report) *report = dup(text);
  });
}

}  // extern "C"
