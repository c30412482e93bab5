#ifndef LOOPVIT_H
#define LOOPVIT_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LvStatus {
  LV_STATUS_OK = 0,
  LV_STATUS_NULL_POINTER = 1,
  LV_STATUS_INVALID_ARGUMENT = 2,
  LV_STATUS_PARSE = 3,
  LV_STATUS_CHECKPOINT = 4,
  LV_STATUS_CAPACITY = 5,
  LV_STATUS_IO = 6,
  LV_STATUS_BUFFER_TOO_SMALL = 7,
  LV_STATUS_INTERNAL = 8,
} LvStatus;

/**
 * A loaded model (32-bit weights).
 */
typedef struct LvModel LvModel;

/**
 * A parsed task with its demonstrations and queries.
 */
typedef struct LvTask LvTask;

/**
 * Halting controls for [`lv_predict`]. `tau = 0` runs all `t_max` steps.
 */
typedef struct LvHaltPolicy {
  double tau;
  uintptr_t t_min;
  uintptr_t t_max;
} LvHaltPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread; empty after success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *lv_last_error(void);

/**
 * Load a checkpoint file into a new model handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LvStatus lv_model_load(const char *path, struct LvModel **out);

/**
 * Create a freshly initialised model from a JSON config (NULL for defaults).
 *
 * # Safety
 * `config_json` must be NULL or NUL-terminated; `out` must be valid.
 */
enum LvStatus lv_model_new(const char *config_json, uint64_t seed, struct LvModel **out);

/**
 * Write the model to a checkpoint file.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum LvStatus lv_model_save(const struct LvModel *model, const char *path);

/**
 * # Safety
 * `model` must come from this library; `out` must be valid.
 */
enum LvStatus lv_model_param_count(const struct LvModel *model, uintptr_t *out);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void lv_model_free(struct LvModel *model);

/**
 * Parse an ARC task from JSON text.
 *
 * # Safety
 * `json` must be NUL-terminated and `out` valid.
 */
enum LvStatus lv_task_parse(const char *json, struct LvTask **out);

/**
 * # Safety
 * `task` must come from this library; `out` must be valid.
 */
enum LvStatus lv_task_num_queries(const struct LvTask *task, uintptr_t *out);

/**
 * # Safety
 * `task` must be NULL or a handle not yet freed.
 */
void lv_task_free(struct LvTask *task);

/**
 * Default policy for a model: `tau = 0.05`, `t_min = 1`, `t_max` from its config.
 *
 * # Safety
 * `model` must come from this library; `out` must be valid.
 */
enum LvStatus lv_default_policy(const struct LvModel *model, struct LvHaltPolicy *out);

/**
 * Predict the output grid of query `query` as row-major colors.
 *
 * On success `*height`, `*width` and `*steps` hold the grid size and the
 * number of executed iterations. If `capacity` is smaller than
 * `height * width` the sizes are still written and `BufferTooSmall` is
 * returned; `cells` may be NULL in that case.
 *
 * # Safety
 * Handles must come from this library; `cells` must point to `capacity`
 * writable bytes; the size pointers must be valid.
 */
enum LvStatus lv_predict(const struct LvModel *model,
                         const struct LvTask *task,
                         uintptr_t query,
                         struct LvHaltPolicy policy,
                         uint8_t *cells,
                         uintptr_t capacity,
                         uintptr_t *height,
                         uintptr_t *width,
                         uintptr_t *steps);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lv_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LOOPVIT_H */
