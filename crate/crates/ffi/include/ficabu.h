#ifndef FICABU_H
#define FICABU_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FicabuStatus {
  FICABU_STATUS_OK = 0,
  FICABU_STATUS_NULL_POINTER = 1,
  FICABU_STATUS_INVALID_UTF8 = 2,
  FICABU_STATUS_INVALID_ARGUMENT = 3,
  FICABU_STATUS_BUFFER_TOO_SMALL = 4,
  FICABU_STATUS_NOT_APPLICABLE = 5,
  FICABU_STATUS_PANIC = 6,
  FICABU_STATUS_DIMENSION = 10,
  FICABU_STATUS_EMPTY_INPUT = 11,
  FICABU_STATUS_CACHE_MISS = 12,
  FICABU_STATUS_LAYER_OUT_OF_RANGE = 13,
  FICABU_STATUS_DEGENERATE_DEPTH = 14,
  FICABU_STATUS_CONFIG = 15,
  FICABU_STATUS_CONSISTENCY = 16,
  FICABU_STATUS_FORMAT = 17,
  FICABU_STATUS_VERSION = 18,
  FICABU_STATUS_TRUNCATED = 19,
  FICABU_STATUS_SHAPE_MISMATCH = 20,
  FICABU_STATUS_NON_FINITE = 21,
  FICABU_STATUS_MISSING = 22,
  FICABU_STATUS_IO = 23,
  FICABU_STATUS_JSON = 24,
} FicabuStatus;

/**
 * Values for [`FicabuUnlearnParams::mode`].
 */
typedef enum FicabuMode {
  FICABU_MODE_SSD_FULL = 0,
  FICABU_MODE_CAU = 1,
  FICABU_MODE_CAU_BALANCED = 2,
} FicabuMode;

/**
 * Values for the `kind` argument of [`ficabu_speedup_vs_core`].
 */
typedef enum FicabuIpKind {
  FICABU_IP_KIND_FIMD = 0,
  FICABU_IP_KIND_DAMPENING = 1,
} FicabuIpKind;

typedef struct FicabuImportance FicabuImportance;

typedef struct FicabuModel FicabuModel;

typedef struct FicabuOutcome FicabuOutcome;

typedef struct FicabuUnlearnParams {
  /**
   * One of the `FicabuMode` values.
   */
  uint32_t mode;
  float alpha;
  float lambda;
  double tau;
  double b_r;
  /**
   * Profile midpoint; NaN selects the middle layer.
   */
  double c_m;
  /**
   * Checkpoint layers; NULL selects the default set.
   */
  const size_t *checkpoints;
  size_t checkpoint_count;
  /**
   * Evaluate checkpoints with INT8 inference.
   */
  bool int8;
} FicabuUnlearnParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ficabu_version(void);

/**
 * Copies the last error message of this thread into `buf` (truncated and
 * always NUL-terminated when `capacity > 0`) and returns its full length.
 *
 * # Safety
 * `buf` must be NULL or point to `capacity` writable bytes.
 */
size_t ficabu_last_error_message(char *buf, size_t capacity);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FicabuStatus ficabu_model_load(const char *path, struct FicabuModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum FicabuStatus ficabu_model_save(const struct FicabuModel *model, const char *path);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void ficabu_model_free(struct FicabuModel *model);

/**
 * Number of parameterized layers.
 *
 * # Safety
 * Pointers must be valid.
 */
enum FicabuStatus ficabu_model_depth(const struct FicabuModel *model, size_t *out);

/**
 * # Safety
 * Pointers must be valid.
 */
enum FicabuStatus ficabu_model_param_count(const struct FicabuModel *model, size_t *out);

/**
 * Elements per input sample.
 *
 * # Safety
 * Pointers must be valid.
 */
enum FicabuStatus ficabu_model_input_len(const struct FicabuModel *model, size_t *out);

/**
 * Top-1 accuracy on `count` samples laid out back to back in `inputs`.
 *
 * # Safety
 * `inputs` must hold `count * input_len` floats and `labels` `count` labels.
 */
enum FicabuStatus ficabu_model_accuracy(const struct FicabuModel *model,
                                        const float *inputs,
                                        const size_t *labels,
                                        size_t count,
                                        bool int8,
                                        double *out);

/**
 * Diagonal Fisher of `model` over the given samples.
 *
 * # Safety
 * As for [`ficabu_model_accuracy`]; `out` must be valid.
 */
enum FicabuStatus ficabu_importance_estimate(const struct FicabuModel *model,
                                             const float *inputs,
                                             const size_t *labels,
                                             size_t count,
                                             struct FicabuImportance **out);

/**
 * Loads an importance file and checks it against `model`.
 *
 * # Safety
 * `path` must be NUL-terminated; other pointers valid.
 */
enum FicabuStatus ficabu_importance_load(const char *path,
                                         const struct FicabuModel *model,
                                         struct FicabuImportance **out);

/**
 * # Safety
 * `map` must come from this library; `path` must be NUL-terminated.
 */
enum FicabuStatus ficabu_importance_save(const struct FicabuImportance *map, const char *path);

/**
 * # Safety
 * `map` must be NULL or a handle not yet freed.
 */
void ficabu_importance_free(struct FicabuImportance *map);

/**
 * Defaults: balanced mode, alpha 10, lambda 1, tau 0.2, b_r 10, middle
 * midpoint, default checkpoints, f32 checks.
 *
 * # Safety
 * `out` must be valid.
 */
enum FicabuStatus ficabu_unlearn_params_default(struct FicabuUnlearnParams *out);

/**
 * Unlearns the given forget samples from a copy of `model`.
 *
 * # Safety
 * `inputs`/`labels` as for [`ficabu_model_accuracy`]; handles and `out`
 * must be valid. `params->checkpoints`, when set, must hold
 * `params->checkpoint_count` entries.
 */
enum FicabuStatus ficabu_unlearn(const struct FicabuModel *model,
                                 const struct FicabuImportance *global,
                                 const float *forget_inputs,
                                 const size_t *forget_labels,
                                 size_t count,
                                 const struct FicabuUnlearnParams *params,
                                 struct FicabuOutcome **out);

/**
 * # Safety
 * `outcome` must be NULL or a handle not yet freed.
 */
void ficabu_outcome_free(struct FicabuOutcome *outcome);

/**
 * # Safety
 * Pointers must be valid.
 */
enum FicabuStatus ficabu_outcome_stop_layer(const struct FicabuOutcome *o, size_t *out);

/**
 * # Safety
 * Pointers must be valid.
 */
enum FicabuStatus ficabu_outcome_early_stop(const struct FicabuOutcome *o, bool *out);

/**
 * MAC total as a percentage of a full SSD run.
 *
 * # Safety
 * Pointers must be valid.
 */
enum FicabuStatus ficabu_outcome_mac_ratio(const struct FicabuOutcome *o, double *out);

/**
 * # Safety
 * Pointers must be valid.
 */
enum FicabuStatus ficabu_outcome_total_macs(const struct FicabuOutcome *o, uint64_t *out);

/**
 * A new model handle holding the unlearned parameters.
 *
 * # Safety
 * Pointers must be valid.
 */
enum FicabuStatus ficabu_outcome_model(const struct FicabuOutcome *o, struct FicabuModel **out);

/**
 * Writes the JSON outcome report into `buf`. `needed` receives the report
 * length without the terminator; `FICABU_STATUS_BUFFER_TOO_SMALL` is
 * returned when `capacity <= needed`.
 *
 * # Safety
 * `buf` must be NULL or point to `capacity` bytes; `needed` must be valid.
 */
enum FicabuStatus ficabu_outcome_report_json(const struct FicabuOutcome *o,
                                             char *buf,
                                             size_t capacity,
                                             size_t *needed);

/**
 * Depth profile scale of layer `l` (1-based, classifier first).
 *
 * # Safety
 * `out` must be valid.
 */
enum FicabuStatus ficabu_profile_scale(size_t l, double b_r, double c_m, size_t depth, double *out);

/**
 * Retain preservation rate in percent; `FICABU_STATUS_NOT_APPLICABLE` when
 * `delta_ssd` is zero.
 *
 * # Safety
 * `out` must be valid.
 */
enum FicabuStatus ficabu_rpr(double delta_ssd, double delta_ours, double *out);

/**
 * Speedup of an IP over the scalar core under the default calibration.
 *
 * # Safety
 * `out` must be valid.
 */
enum FicabuStatus ficabu_speedup_vs_core(uint64_t elements, uint32_t kind, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FICABU_H */
