#ifndef DEEPRHYTHM_H
#define DEEPRHYTHM_H

/* C interface to the detector: configuration, the batch commands and
 * single-video scoring. Every call returns a dr_status; on failure the
 * message is available from dr_last_error() on the same thread. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  define DR_API __declspec(dllexport)
#else
#  define DR_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum dr_status {
    DR_OK = 0,
    DR_ERR_USAGE = 1,   /* bad arguments or configuration */
    DR_ERR_DATA = 2,    /* missing or malformed inputs, I/O */
    DR_ERR_NUMERIC = 3  /* divergence, non-finite values */
} dr_status;

typedef struct dr_config dr_config;
typedef struct dr_model dr_model;

/* Progress lines; NULL silences them. Process-wide. */
typedef void (*dr_log_fn)(const char* line, void* user);
DR_API void dr_set_logger(dr_log_fn fn, void* user);

DR_API const char* dr_last_error(void);
DR_API const char* dr_version(void);

/* path may be NULL (preset defaults only); preset may be NULL. */
DR_API dr_status dr_config_load(const char* path, const char* preset, dr_config** out);
DR_API dr_status dr_config_from_json(const char* text, const char* preset, dr_config** out);
DR_API void dr_config_free(dr_config* cfg);
DR_API dr_status dr_config_set_seed(dr_config* cfg, uint64_t seed);
DR_API dr_status dr_config_set_ablation(dr_config* cfg, const char* flags);
DR_API dr_status dr_config_hash(const dr_config* cfg, uint64_t* out);
/* Canonical JSON. Writes at most cap bytes including the terminator and
 * stores the full length (without terminator) in *needed. */
DR_API dr_status dr_config_json(const dr_config* cfg, char* buf, size_t cap, size_t* needed);

DR_API dr_status dr_synth(const dr_config* cfg, const char* out_dir);
DR_API dr_status dr_extract(const dr_config* cfg, const char* manifest, const char* out_dir);
/* kind: jpeg, blur, noise or sampling. Degrades the test split unless
 * all_splits is nonzero. */
DR_API dr_status dr_degrade(const dr_config* cfg, const char* manifest, const char* kind, double degree,
                            const char* out_dir, int all_splits);
DR_API dr_status dr_train(const dr_config* cfg, const char* data_dir, const char* out_dir);
/* split: train, val or test. accuracy may be NULL. */
DR_API dr_status dr_eval(const dr_config* cfg, const char* data_dir, const char* model_dir, const char* out_dir,
                         const char* split, double* accuracy);
DR_API dr_status dr_ablation(const dr_config* cfg, const char* data_dir, const char* out_dir);
DR_API dr_status dr_robustness(const dr_config* cfg, const char* manifest, const char* model_dir,
                               const char* out_dir);
DR_API dr_status dr_report(const char* in_dir, const char* out_file);

DR_API dr_status dr_model_load(const char* model_dir, dr_model** out);
DR_API void dr_model_free(dr_model* model);
/* Extracts one video (frame directory + landmark sidecar) with cfg and
 * returns the probability that it is fake. */
DR_API dr_status dr_model_score_video(dr_model* model, const dr_config* cfg, const char* frames_dir,
                                      const char* landmarks, double fps, double* p_fake);

#ifdef __cplusplus
}
#endif

#endif
