#ifndef Q16_H
#define Q16_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum {
  Q16_STATUS_OK = 0,
  Q16_STATUS_NULL_POINTER = 1,
  Q16_STATUS_INVALID_ARGUMENT = 2,
  Q16_STATUS_IO = 3,
  Q16_STATUS_FORMAT = 4,
  Q16_STATUS_DIM_MISMATCH = 5,
  Q16_STATUS_MATH = 6,
  Q16_STATUS_PANIC = 99,
} Q16Status;

/**
 * Trained prompt model.
 */
typedef struct Q16Model Q16Model;

/**
 * Flag report produced by `q16_scan`.
 */
typedef struct Q16Report Q16Report;

/**
 * Loaded embedding container.
 */
typedef struct Q16Store Q16Store;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *q16_version(void);

/**
 * Message for the last failed call on this thread, empty after a success.
 * Valid until the next q16 call on the same thread.
 */
const char *q16_last_error(void);

/**
 * Loads an embedding container from its `*.meta.json` path.
 *
 * # Safety
 * `meta_path` must be a NUL-terminated string; `out` must be writable.
 */
Q16Status q16_store_load(const char *meta_path, Q16Store **out);

/**
 * # Safety
 * `store` must come from `q16_store_load` and not be freed twice. Null is ignored.
 */
void q16_store_free(Q16Store *store);

/**
 * Number of rows, or 0 for a null handle.
 *
 * # Safety
 * `store` must be null or a live handle.
 */
size_t q16_store_count(const Q16Store *store);

/**
 * Embedding width, or 0 for a null handle.
 *
 * # Safety
 * `store` must be null or a live handle.
 */
size_t q16_store_dim(const Q16Store *store);

/**
 * Loads a model JSON file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
Q16Status q16_model_load(const char *path, Q16Model **out);

/**
 * # Safety
 * `model` must come from `q16_model_load` and not be freed twice. Null is ignored.
 */
void q16_model_free(Q16Model *model);

/**
 * Prompt width, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t q16_model_dim(const Q16Model *model);

/**
 * Cosine similarity of two `len`-vectors.
 *
 * # Safety
 * `x` and `z` must point to `len` floats; `out` must be writable.
 */
Q16Status q16_cosine_similarity(const float *x, const float *z, size_t len, double *out);

/**
 * Probability that embedding `x` (length `len`) is inappropriate.
 *
 * # Safety
 * `model` must be live, `x` must point to `len` floats, `out` writable.
 */
Q16Status q16_score(const Q16Model *model, const float *x, size_t len, double *out);

/**
 * Scans every row of `store`. With `emit_all` false the report keeps only
 * flagged entries. `dataset_name` may be null.
 *
 * # Safety
 * Handles must be live; `dataset_name` null or NUL-terminated; `out` writable.
 */
Q16Status q16_scan(const Q16Store *store,
                   const Q16Model *model,
                   double threshold,
                   bool emit_all,
                   const char *dataset_name,
                   Q16Report **out);

/**
 * # Safety
 * `report` must be null or a live handle.
 */
size_t q16_report_total(const Q16Report *report);

/**
 * # Safety
 * `report` must be null or a live handle.
 */
size_t q16_report_flagged(const Q16Report *report);

/**
 * Flagged over total.
 *
 * # Safety
 * `report` must be live; `out` writable.
 */
Q16Status q16_report_ratio(const Q16Report *report, double *out);

/**
 * Writes the report in its line-delimited JSON form.
 *
 * # Safety
 * `report` must be live; `path` NUL-terminated.
 */
Q16Status q16_report_write(const Q16Report *report, const char *path);

/**
 * # Safety
 * `report` must come from `q16_scan` and not be freed twice. Null is ignored.
 */
void q16_report_free(Q16Report *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* Q16_H */
