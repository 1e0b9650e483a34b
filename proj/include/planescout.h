/* planescout: multi-scale DQN view-plane search in 3D scalar volumes.
 *
 * C interface over the engine. All functions return a ps_status; on failure
 * ps_last_error() describes the problem (thread-local, valid until the next
 * failing call on the same thread). Strings returned through char** output
 * parameters are owned by the caller and released with ps_string_free().
 *
 * Run configurations cross this boundary as UTF-8 JSON text; the schema is
 * documented in the project README. Unknown keys are rejected.
 */

#ifndef PLANESCOUT_H
#define PLANESCOUT_H

#include <stdint.h>

#if defined(_WIN32)
#  ifdef PS_BUILDING_SHARED
#    define PS_API __declspec(dllexport)
#  else
#    define PS_API __declspec(dllimport)
#  endif
#else
#  define PS_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ps_status {
  PS_OK = 0,
  PS_ERR_IO = 1,         /* file missing / unreadable / unwritable */
  PS_ERR_FORMAT = 2,     /* malformed volume, checkpoint or JSON input */
  PS_ERR_CONFIG = 3,     /* invalid configuration or usage */
  PS_ERR_CONTRACT = 4,   /* API precondition violated */
  PS_ERR_NUMERIC = 5,    /* non-finite value during training/inference */
  PS_ERR_DEGENERATE = 6, /* plane normal became degenerate */
  PS_ERR_UNKNOWN = 7
} ps_status;

PS_API const char* ps_version(void);
PS_API const char* ps_status_name(ps_status status);

/* Message of the most recent failure on this thread, or "" when none. */
PS_API const char* ps_last_error(void);

/* Worker threads for sampling/training math. 0 = hardware default. */
PS_API void ps_set_threads(int n);

PS_API void ps_string_free(char* s);

/* ---- Volumes (opaque handles) ------------------------------------------ */

typedef struct ps_volume ps_volume;

/* Loads a PVOL file (magic "PVOL", version 1, dims u32[3], spacing f64[3],
 * origin f64[3], f32 voxels x-fastest, little-endian). */
PS_API ps_status ps_volume_load(const char* path, ps_volume** out);

PS_API ps_status ps_volume_create(const uint32_t dims[3],
                                  const double spacing_mm[3],
                                  const double origin_mm[3],
                                  const float* voxels, ps_volume** out);

PS_API ps_status ps_volume_save(const ps_volume* volume, const char* path);

PS_API ps_status ps_volume_dims(const ps_volume* volume, uint32_t out[3]);
PS_API ps_status ps_volume_spacing(const ps_volume* volume, double out[3]);
PS_API ps_status ps_volume_origin(const ps_volume* volume, double out[3]);

/* Trilinear sample at a world-space point; out-of-volume points read 0. */
PS_API ps_status ps_volume_sample(const ps_volume* volume, double x, double y,
                                  double z, double* out);

PS_API void ps_volume_free(ps_volume* volume);

/* ---- Pipeline runs ------------------------------------------------------ */

/* Generates `count` phantom volumes plus ground-truth sidecars and a
 * manifest under out_dir. On success *manifest_path_out (optional) receives
 * the manifest path. */
PS_API ps_status ps_phantom_generate(const char* config_json, uint32_t count,
                                     const char* out_dir,
                                     char** manifest_path_out);

/* Trains one DQN variant over a dataset manifest; writes checkpoint.pqn,
 * metrics.jsonl, train_report.json and resolved_config.json to out_dir. */
PS_API ps_status ps_train_run(const char* config_json,
                              const char* manifest_path, const char* out_dir);

/* Greedy multi-scale rollout of a checkpoint over one volume; writes
 * trajectory.jsonl, final_plane.json and resolved_config.json to out_dir.
 * On success *result_json_out (optional) receives a summary (final plane,
 * steps, terminal event, per-step latency). */
PS_API ps_status ps_infer_run(const char* config_json,
                              const char* checkpoint_path,
                              const char* volume_path, const char* out_dir,
                              char** result_json_out);

/* Evaluates the checkpoints named in the config's eval.checkpoints map over
 * a test manifest from one fixed initial plane per volume; writes report.csv,
 * report.json, per-run trajectories and resolved_config.json to out_dir. */
PS_API ps_status ps_eval_run(const char* config_json, const char* manifest_path,
                             const char* out_dir);

/* Reads a checkpoint and returns a JSON summary: architecture, parameter
 * count, training step counter. */
PS_API ps_status ps_checkpoint_inspect(const char* checkpoint_path,
                                       char** summary_json_out);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* PLANESCOUT_H */
