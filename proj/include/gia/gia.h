/* C interface to the gradient inversion lab. All functions return a gia_status;
 * on failure gia_last_error() describes the problem for the calling thread. */
#ifndef GIA_GIA_H
#define GIA_GIA_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(__GNUC__)
#define GIA_API __attribute__((visibility("default")))
#else
#define GIA_API
#endif

typedef enum gia_status {
  GIA_OK = 0,
  GIA_RUNTIME_FAILURE = 1,
  GIA_PRECONDITION = 2
} gia_status;

typedef struct gia_config gia_config;
typedef struct gia_update gia_update;
typedef struct gia_model gia_model;

GIA_API const char* gia_version(void);
GIA_API const char* gia_last_error(void);

/* Strings returned through char** are owned by the caller. */
GIA_API void gia_string_free(char* s);

/* Progress messages from long-running commands; NULL disables. */
typedef void (*gia_log_fn)(const char* message, void* user);
GIA_API void gia_set_log_callback(gia_log_fn fn, void* user);

/* ---- configuration ---- */
GIA_API gia_status gia_config_new(gia_config** out);
GIA_API gia_status gia_config_load(const char* path, gia_config** out);
GIA_API gia_status gia_config_parse(const char* text, gia_config** out);
GIA_API void gia_config_free(gia_config* cfg);
GIA_API gia_status gia_config_set(gia_config* cfg, const char* key, const char* value);
GIA_API gia_status gia_config_get(const gia_config* cfg, const char* key, char** value);
/* "key = value" lines for every key, defaults included. */
GIA_API gia_status gia_config_dump(const gia_config* cfg, char** text);
/* Checks that the configuration resolves to a valid experiment. */
GIA_API gia_status gia_config_validate(const gia_config* cfg);
/* Key names and help text, index in [0, gia_config_key_count()). */
GIA_API size_t gia_config_key_count(void);
GIA_API const char* gia_config_key_name(size_t i);
GIA_API const char* gia_config_key_default(size_t i);
GIA_API const char* gia_config_key_help(size_t i);

/* ---- update and model files ---- */
typedef struct gia_update_info {
  size_t batch_size;
  size_t gradient_count;
  size_t gradient_elements;
  int inference_mode;
  int has_stats;
} gia_update_info;

GIA_API gia_status gia_update_load(const char* path, gia_update** out);
GIA_API void gia_update_free(gia_update* u);
GIA_API gia_status gia_update_info_get(const gia_update* u, gia_update_info* info);

typedef struct gia_model_info {
  size_t channels, height, width, num_classes;
  size_t parameter_count;
  size_t parameter_elements;
  size_t bn_layers;
} gia_model_info;

GIA_API gia_status gia_model_load(const char* path, gia_model** out);
GIA_API void gia_model_free(gia_model* m);
GIA_API gia_status gia_model_info_get(const gia_model* m, gia_model_info* info);

/* ---- commands ---- */
typedef struct gia_client_result {
  char* update_path;
  char* truth_path;
  char* model_path;
} gia_client_result;
GIA_API void gia_client_result_free(gia_client_result* r);

GIA_API gia_status gia_cmd_client(const gia_config* cfg, gia_client_result* out);

typedef struct gia_attack_result {
  double initial_discrepancy;
  double final_discrepancy;
  double ssim; /* NaN without ground truth */
  size_t image_count;
} gia_attack_result;

/* truth_path may be NULL. */
GIA_API gia_status gia_cmd_attack(const gia_config* cfg, const char* update_path, const char* model_path,
                                  const char* truth_path, gia_attack_result* out);

typedef struct gia_search_result {
  size_t n_trials, scored, diverged, pruned;
  size_t best_trial;
  double best_ssim; /* NaN when nothing scored */
  double random_baseline;
  int success;
} gia_search_result;

GIA_API gia_status gia_cmd_search(const gia_config* cfg, gia_search_result* out);

/* markdown and json may be NULL when not wanted. */
GIA_API gia_status gia_cmd_matrix(const gia_config* cfg, char** markdown, char** json);

GIA_API gia_status gia_cmd_batchsweep(const gia_config* cfg, char** json);

/* Sets *all_pass and a one-line-per-check report. */
GIA_API gia_status gia_selftest(int* all_pass, char** report);

#ifdef __cplusplus
}
#endif

#endif
