// giactl: command-line front end over the C API.
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gia/gia.h"

namespace {

struct Options {
  std::string config_path;
  std::string seed, out, jobs, pretrain_steps, sizes;
  std::vector<std::string> sets;
  std::string update, model, truth;
  bool quiet = false;
};

int fail(gia_status st) {
  std::fprintf(stderr, "error: %s\n", gia_last_error());
  return static_cast<int>(st);
}

// Builds the configuration: file first, then --set pairs, then dedicated flags.
gia_status make_config(const Options& o, gia_config** cfg) {
  gia_status st = o.config_path.empty() ? gia_config_new(cfg) : gia_config_load(o.config_path.c_str(), cfg);
  if (st != GIA_OK) return st;
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      gia_config_free(*cfg);
      *cfg = nullptr;
      std::fprintf(stderr, "error: --set expects key=value, got '%s'\n", kv.c_str());
      return GIA_PRECONDITION;
    }
    if ((st = gia_config_set(*cfg, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str())) != GIA_OK) return st;
  }
  const std::pair<const char*, const std::string*> flags[] = {
      {"seed", &o.seed}, {"out", &o.out}, {"jobs", &o.jobs}, {"pretrain_steps", &o.pretrain_steps}, {"sweep_sizes", &o.sizes}};
  for (const auto& [key, value] : flags) {
    if (value->empty()) continue;
    if ((st = gia_config_set(*cfg, key, value->c_str())) != GIA_OK) return st;
  }
  return gia_config_validate(*cfg);
}

void log_to_stderr(const char* msg, void*) { std::fprintf(stderr, "%s\n", msg); }

void print_owned(char* s) {
  if (!s) return;
  std::fputs(s, stdout);
  gia_string_free(s);
}

int run(const std::string& verb, const Options& o) {
  if (!o.quiet) gia_set_log_callback(log_to_stderr, nullptr);
  if (verb == "selftest") {
    int pass = 0;
    char* report = nullptr;
    if (gia_status st = gia_selftest(&pass, &report); st != GIA_OK) return fail(st);
    print_owned(report);
    return pass ? 0 : 1;
  }

  gia_config* cfg = nullptr;
  if (gia_status st = make_config(o, &cfg); st != GIA_OK) {
    if (cfg) gia_config_free(cfg);
    return fail(st);
  }
  gia_status st = GIA_OK;
  if (verb == "client") {
    gia_client_result r{};
    if ((st = gia_cmd_client(cfg, &r)) == GIA_OK) {
      std::printf("update %s\ntruth %s\nmodel %s\n", r.update_path, r.truth_path, r.model_path);
      gia_client_result_free(&r);
    }
  } else if (verb == "attack") {
    gia_attack_result r{};
    st = gia_cmd_attack(cfg, o.update.c_str(), o.model.c_str(), o.truth.empty() ? nullptr : o.truth.c_str(), &r);
    if (st == GIA_OK) {
      std::printf("images %zu\ninitial_discrepancy %.9g\nfinal_discrepancy %.9g\n", r.image_count,
                  r.initial_discrepancy, r.final_discrepancy);
      if (!std::isnan(r.ssim)) std::printf("ssim %.6f\n", r.ssim);
    }
  } else if (verb == "search") {
    gia_search_result r{};
    if ((st = gia_cmd_search(cfg, &r)) == GIA_OK) {
      std::printf("trials %zu scored %zu diverged %zu pruned %zu\n", r.n_trials, r.scored, r.diverged, r.pruned);
      std::printf("best trial %zu ssim %.6f baseline %.6f verdict %s\n", r.best_trial, r.best_ssim, r.random_baseline,
                  r.success ? "success" : "failure");
    }
  } else if (verb == "matrix") {
    char* md = nullptr;
    if ((st = gia_cmd_matrix(cfg, &md, nullptr)) == GIA_OK) print_owned(md);
  } else if (verb == "batchsweep") {
    char* json = nullptr;
    if ((st = gia_cmd_batchsweep(cfg, &json)) == GIA_OK) {
      print_owned(json);
      std::printf("\n");
    }
  }
  gia_config_free(cfg);
  return st == GIA_OK ? 0 : fail(st);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient inversion attack lab"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "key = value configuration file")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "master seed");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--jobs", o.jobs, "parallel workers");
    sub->add_option("--set", o.sets, "override a config key (key=value), repeatable");
    sub->add_option("--pretrain-steps", o.pretrain_steps, "SGD steps before the attacked update");
    sub->add_flag("-q,--quiet", o.quiet, "suppress progress messages");
  };

  auto* client = app.add_subcommand("client", "simulate one client step and write update, truth and model files");
  common(client);
  auto* attack = app.add_subcommand("attack", "reconstruct a batch from an update file");
  common(attack);
  attack->add_option("--update", o.update, "update container")->required()->check(CLI::ExistingFile);
  attack->add_option("--model", o.model, "model container")->required()->check(CLI::ExistingFile);
  attack->add_option("--truth", o.truth, "ground-truth bundle, enables SSIM scoring")->check(CLI::ExistingFile);
  auto* search = app.add_subcommand("search", "random hyperparameter search for one setting");
  common(search);
  auto* matrix = app.add_subcommand("matrix", "preset x setting success matrix");
  common(matrix);
  auto* sweep = app.add_subcommand("batchsweep", "no-stats attack across batch sizes");
  common(sweep);
  sweep->add_option("--sizes", o.sizes, "comma-separated batch sizes");
  auto* self = app.add_subcommand("selftest", "gradient, recovery and container checks");
  self->add_flag("-q,--quiet", o.quiet, "suppress progress messages");
  auto* keys = app.add_subcommand("keys", "list configuration keys and defaults");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (keys->parsed()) {
    for (size_t i = 0; i < gia_config_key_count(); ++i) {
      std::printf("%-20s %-14s %s\n", gia_config_key_name(i), gia_config_key_default(i), gia_config_key_help(i));
    }
    return 0;
  }
  for (auto* sub : {client, attack, search, matrix, sweep, self}) {
    if (sub->parsed()) return run(sub->get_name(), o);
  }
  return 2;
}
