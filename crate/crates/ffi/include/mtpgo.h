#ifndef MTPGO_H
#define MTPGO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum MtpgoStatus {
  MTPGO_STATUS_OK = 0,
  MTPGO_STATUS_NULL_POINTER = 1,
  MTPGO_STATUS_INVALID_ARGUMENT = 2,
  MTPGO_STATUS_CONFIG = 3,
  MTPGO_STATUS_DATA = 4,
  MTPGO_STATUS_IO = 5,
  MTPGO_STATUS_FORMAT = 6,
  MTPGO_STATUS_NUMERIC = 7,
  MTPGO_STATUS_PANIC = 8,
} MtpgoStatus;

// Opaque set of per-agent mixture forecasts in world coordinates.
typedef struct MtpgoForecasts MtpgoForecasts;

// Opaque trained model.
typedef struct MtpgoModel MtpgoModel;

// Opaque trajectory table.
typedef struct MtpgoTable MtpgoTable;

// Identity of one forecast agent.
typedef struct MtpgoAgentInfo {
  // Index of the scene window the agent belongs to.
  size_t scene;
  // Source frame of the prediction instant.
  int64_t frame;
  uint64_t agent_id;
  bool is_center;
} MtpgoAgentInfo;

// Aggregate metrics; likelihood fields are NaN for baselines.
typedef struct MtpgoMetrics {
  size_t scenes;
  size_t agents;
  double ade;
  double fde;
  double mr;
  double apde;
  double anll;
  double fnll;
} MtpgoMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *mtpgo_version(void);

// Copies the last error message of this thread into `buf` (truncated and
// always NUL-terminated when `len > 0`). Returns the full message length
// including the terminator, so a second call can size the buffer.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t mtpgo_last_error(char *buf, size_t len);

// Generates `n_scenes` synthetic scenes of `kind` (`"highway"`,
// `"roundabout"` or `"fork"`).
//
// # Safety
// `kind` must be a NUL-terminated string and `out` a writable pointer.
enum MtpgoStatus mtpgo_table_generate(const char *kind,
                                      size_t n_scenes,
                                      uint64_t seed,
                                      struct MtpgoTable **out);

// Reads a trajectory CSV. A null `geometry` selects the sidecar next to
// the CSV.
//
// # Safety
// Strings must be NUL-terminated (or null where allowed); `out` writable.
enum MtpgoStatus mtpgo_table_load(const char *csv, const char *geometry, struct MtpgoTable **out);

// Writes the table as CSV plus geometry sidecar.
//
// # Safety
// `table` must be a live handle and `csv` a NUL-terminated string.
enum MtpgoStatus mtpgo_table_save(const struct MtpgoTable *table, const char *csv);

// Number of rows, or 0 for a null handle.
//
// # Safety
// `table` must be null or a live handle.
size_t mtpgo_table_rows(const struct MtpgoTable *table);

// # Safety
// `table` must be null or a handle not yet freed.
void mtpgo_table_free(struct MtpgoTable *table);

// Trains a model on the training split of `table`. `config_toml` holds
// training configuration keys (null for defaults). When `checkpoint` is
// not null the checkpoint is also written there. Divergence returns
// `MTPGO_STATUS_NUMERIC` and still hands out the last finite model.
//
// # Safety
// `table` must be a live handle, strings NUL-terminated or null, `out`
// writable.
enum MtpgoStatus mtpgo_train(const struct MtpgoTable *table,
                             const char *config_toml,
                             size_t stride,
                             const char *checkpoint,
                             struct MtpgoModel **out);

// # Safety
// `path` must be NUL-terminated and `out` writable.
enum MtpgoStatus mtpgo_model_load(const char *path, struct MtpgoModel **out);

// # Safety
// `model` must be a live handle and `path` NUL-terminated.
enum MtpgoStatus mtpgo_model_save(const struct MtpgoModel *model, const char *path);

// Mixture components M, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t mtpgo_model_components(const struct MtpgoModel *model);

// Prediction horizon in steps, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t mtpgo_model_horizon(const struct MtpgoModel *model);

// # Safety
// `model` must be null or a handle not yet freed.
void mtpgo_model_free(struct MtpgoModel *model);

// Rollout forecasts for every agent of every window of `table`.
//
// # Safety
// Handles must be live and `out` writable.
enum MtpgoStatus mtpgo_predict(const struct MtpgoModel *model,
                               const struct MtpgoTable *table,
                               size_t stride,
                               struct MtpgoForecasts **out);

// Number of agents in the set, or 0 for a null handle.
//
// # Safety
// `set` must be null or a live handle.
size_t mtpgo_forecasts_len(const struct MtpgoForecasts *set);

// # Safety
// `set` must be a live handle and `info` writable.
enum MtpgoStatus mtpgo_forecasts_info(const struct MtpgoForecasts *set,
                                      size_t index,
                                      struct MtpgoAgentInfo *info);

// Copies agent `index`'s mixture into caller buffers: `pi` holds M
// weights, `means` M·T·2 values ordered (component, step, xy) and `covs`
// M·T·4 row-major 2×2 covariances in the same order. Any buffer may be
// null to skip it.
//
// # Safety
// Non-null buffers must hold the stated number of doubles.
enum MtpgoStatus mtpgo_forecasts_copy(const struct MtpgoForecasts *set,
                                      size_t index,
                                      double *pi,
                                      double *means,
                                      double *covs);

// # Safety
// `set` must be null or a handle not yet freed.
void mtpgo_forecasts_free(struct MtpgoForecasts *set);

// Evaluates `model`, or the analytic `baseline` (`"cv"`/`"ca"`) when
// `model` is null, on every window of `table`. Baselines window the data
// with `config_toml` (null for defaults); models use their own settings.
//
// # Safety
// Handles must be live or null where allowed, strings NUL-terminated or
// null, `out` writable.
enum MtpgoStatus mtpgo_evaluate(const struct MtpgoModel *model,
                                const char *baseline,
                                const char *config_toml,
                                const struct MtpgoTable *table,
                                size_t stride,
                                bool center_only,
                                struct MtpgoMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MTPGO_H */
