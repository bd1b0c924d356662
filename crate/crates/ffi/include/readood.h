#ifndef READOOD_H
#define READOOD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ReadoodStatus {
  READOOD_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  READOOD_STATUS_NULL_POINTER = 1,
  READOOD_STATUS_INVALID_ARGUMENT = 2,
  READOOD_STATUS_IO = 3,
  /**
   * The checkpoint file could not be read or is malformed.
   */
  READOOD_STATUS_CHECKPOINT = 4,
  READOOD_STATUS_DATA = 5,
  /**
   * The detector lacks class statistics, complexity bounds or calibration.
   */
  READOOD_STATUS_UNCALIBRATED = 6,
  READOOD_STATUS_SHAPE = 7,
  READOOD_STATUS_INTERNAL = 8,
} ReadoodStatus;

/**
 * Opaque detector handle.
 */
typedef struct ReadoodDetector ReadoodDetector;

/**
 * Per-image detection result.
 */
typedef struct ReadoodScore {
  double score_cla;
  double score_rec_raw;
  double complexity;
  double lambda;
  double final_score;
  /**
   * 1 when the image is judged in-distribution.
   */
  uint8_t is_id;
  uint32_t predicted_class;
} ReadoodScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *readood_version(void);

/**
 * Message of the last failed call on this thread. Valid until the next failing
 * call on the same thread; empty when nothing has failed.
 */
const char *readood_last_error_message(void);

/**
 * Loads a detector checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ReadoodStatus readood_detector_load(const char *path, struct ReadoodDetector **out);

/**
 * Releases a detector. Null is ignored.
 *
 * # Safety
 * `det` must be null or a handle from [`readood_detector_load`] not yet freed.
 */
void readood_detector_free(struct ReadoodDetector *det);

/**
 * Expected image layout `[channels, height, width]`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum ReadoodStatus readood_detector_input_shape(const struct ReadoodDetector *det,
                                                size_t *channels,
                                                size_t *height,
                                                size_t *width);

/**
 * Calibrated perturbation magnitude and threshold.
 *
 * # Safety
 * All pointers must be valid.
 */
enum ReadoodStatus readood_detector_calibration(const struct ReadoodDetector *det,
                                                double *epsilon,
                                                double *tau);

/**
 * Scores `n` images laid out as contiguous `[n, C, H, W]` floats in `[0, 1]`.
 * `out` receives `n` results.
 *
 * # Safety
 * `images` must hold `n * C * H * W` floats and `out` room for `n` results.
 */
enum ReadoodStatus readood_detector_score(const struct ReadoodDetector *det,
                                          const float *images,
                                          size_t n,
                                          struct ReadoodScore *out);

/**
 * Area under the ROC curve with ID as the positive class.
 *
 * # Safety
 * `id` and `ood` must hold `n_id` and `n_ood` values; `out` must be valid.
 */
enum ReadoodStatus readood_auroc(const double *id,
                                 size_t n_id,
                                 const double *ood,
                                 size_t n_ood,
                                 double *out);

/**
 * OOD false-positive rate at the threshold keeping `tpr` of ID scores.
 *
 * # Safety
 * `id` and `ood` must hold `n_id` and `n_ood` values; `fpr` and `tau` must be valid.
 */
enum ReadoodStatus readood_fpr_at_tpr(const double *id,
                                      size_t n_id,
                                      const double *ood,
                                      size_t n_ood,
                                      double tpr,
                                      double *fpr,
                                      double *tau);

/**
 * Compressed bits per dimension of one image with values in `[0, 1]`.
 *
 * # Safety
 * `image` must hold `len` floats and `out` must be valid.
 */
enum ReadoodStatus readood_complexity(const float *image, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* READOOD_H */
