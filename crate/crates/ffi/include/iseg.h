#ifndef ISEG_H
#define ISEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IsegStatus {
  ISEG_STATUS_OK = 0,
  ISEG_STATUS_NULL_POINTER = 1,
  ISEG_STATUS_INVALID_ARGUMENT = 2,
  ISEG_STATUS_DIM_MISMATCH = 3,
  ISEG_STATUS_OUT_OF_BOUNDS = 4,
  ISEG_STATUS_EMPTY_INPUT = 5,
  ISEG_STATUS_IO = 6,
  ISEG_STATUS_FORMAT = 7,
  ISEG_STATUS_MISSING_WEIGHTS = 8,
  ISEG_STATUS_NUMERIC = 9,
  ISEG_STATUS_PANIC = 10,
} IsegStatus;

typedef enum IsegFeatureSource {
  ISEG_FEATURE_SOURCE_RAW_PATCH = 0,
  ISEG_FEATURE_SOURCE_ENCODER_STAGE2 = 1,
} IsegFeatureSource;

/**
 * Loaded model weights.
 */
typedef struct IsegModel IsegModel;

/**
 * Single-image click session. Holds a reference to its model's weights, so
 * the model handle may be freed first.
 */
typedef struct IsegSession IsegSession;

typedef struct IsegClick {
  size_t row;
  size_t col;
  /**
   * Nonzero for a foreground click.
   */
  uint8_t positive;
} IsegClick;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *iseg_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *iseg_last_error(void);

/**
 * Fresh weights for the default architecture.
 *
 * # Safety
 * `out` must be a valid pointer to a writable handle slot.
 */
enum IsegStatus iseg_model_init(uint64_t seed, struct IsegModel **out);

/**
 * Loads a weights manifest written by `iseg train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a writable handle slot.
 */
enum IsegStatus iseg_model_load(const char *path, struct IsegModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum IsegStatus iseg_model_save(const struct IsegModel *model, const char *path);

/**
 * Number of scalar parameters, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
size_t iseg_model_num_params(const struct IsegModel *model);

/**
 * # Safety
 * `model` must be null or an unfreed handle from this library.
 */
void iseg_model_free(struct IsegModel *model);

/**
 * Foreground probabilities for `image` given `clicks` (ordinals follow the
 * array order). `out_probs` receives `height * width` values.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum IsegStatus iseg_predict(const struct IsegModel *model,
                             const double *image,
                             size_t height,
                             size_t width,
                             const struct IsegClick *clicks,
                             size_t n_clicks,
                             double *out_probs);

/**
 * Starts a click session on a copy of `image`.
 *
 * # Safety
 * `image` must hold `height * width` values; `out` must be writable.
 */
enum IsegStatus iseg_session_new(const struct IsegModel *model,
                                 const double *image,
                                 size_t height,
                                 size_t width,
                                 struct IsegSession **out);

/**
 * Adds a click and reruns the model on the full click history.
 *
 * # Safety
 * `session` must be a live handle from this library.
 */
enum IsegStatus iseg_session_add_click(struct IsegSession *session, struct IsegClick click);

/**
 * Removes the last click; `ISEG_STATUS_EMPTY_INPUT` when there is none.
 *
 * # Safety
 * `session` must be a live handle from this library.
 */
enum IsegStatus iseg_session_undo(struct IsegSession *session);

/**
 * # Safety
 * `session` must be null or a live handle.
 */
size_t iseg_session_click_count(const struct IsegSession *session);

/**
 * Current probabilities; `len` must equal `height * width`.
 *
 * # Safety
 * `out` must hold `len` doubles.
 */
enum IsegStatus iseg_session_probs(const struct IsegSession *session, double *out, size_t len);

/**
 * Current mask thresholded at `threshold`, one byte per pixel.
 *
 * # Safety
 * `out` must hold `len` bytes.
 */
enum IsegStatus iseg_session_mask(const struct IsegSession *session,
                                  double threshold,
                                  uint8_t *out,
                                  size_t len);

/**
 * # Safety
 * `session` must be null or an unfreed handle from this library.
 */
void iseg_session_free(struct IsegSession *session);

/**
 * Propagates seed masks through a `depth x height x width` volume with the
 * default settings. `seed_masks` holds `n_seeds` masks back to back;
 * `out_masks` receives `depth` masks and, when non-null, `out_provenance`
 * the seed slice each slice was propagated from. `model` may be null for
 * `ISEG_FEATURE_SOURCE_RAW_PATCH`.
 *
 * # Safety
 * Buffers must hold the element counts described above.
 */
enum IsegStatus iseg_propagate(const struct IsegModel *model,
                               enum IsegFeatureSource feature_source,
                               const double *volume,
                               size_t depth,
                               size_t height,
                               size_t width,
                               const size_t *seed_slices,
                               const uint8_t *seed_masks,
                               size_t n_seeds,
                               uint8_t *out_masks,
                               size_t *out_provenance);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ISEG_H */
