#ifndef PIZA_H
#define PIZA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum PizaStatus {
  PIZA_STATUS_OK = 0,
  PIZA_STATUS_NULL_POINTER = 1,
  PIZA_STATUS_INVALID_ARGUMENT = 2,
  PIZA_STATUS_IO = 3,
  PIZA_STATUS_PARSE = 4,
  PIZA_STATUS_BUFFER_TOO_SMALL = 5,
  PIZA_STATUS_NUMERIC = 6,
  PIZA_STATUS_PANIC = 7,
} PizaStatus;

/**
 * Trained toy localizer, optionally with the zoom module.
 */
typedef struct PizaModel PizaModel;

/**
 * Fitted area-ratio distribution.
 */
typedef struct PizaPrior PizaPrior;

/**
 * Axis-aligned box in pixel coordinates, `x0 < x1`, `y0 < y1`.
 */
typedef struct PizaBox {
  double x0;
  double y0;
  double x1;
  double y1;
} PizaBox;

/**
 * Search-process generation settings.
 */
typedef struct PizaGenParams {
  double lambda1;
  double lambda2;
  double lambda2_growth;
  double min_edge;
  uint32_t t_max;
  uint32_t max_retries;
  /**
   * Nonzero: unit exponents; zero: decaying-weight exponents.
   */
  uint8_t uniform_exponent;
} PizaGenParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *piza_version(void);

/**
 * Copies the last error message of this thread into `buf` (truncated,
 * always NUL-terminated when `cap > 0`) and returns its full length.
 *
 * # Safety
 * `buf` must be valid for `cap` bytes or null.
 */
size_t piza_last_error_message(char *buf, size_t cap);

/**
 * # Safety
 * `a`, `b` and `out` must point to valid objects.
 */
enum PizaStatus piza_iou(const struct PizaBox *a, const struct PizaBox *b, double *out);

/**
 * Mean accuracy over the IoU thresholds 0.50, 0.55, …, 0.95.
 *
 * # Safety
 * `ious` must be valid for `n` values and `out` writable.
 */
enum PizaStatus piza_mean_accuracy(const double *ious, size_t n, double *out);

/**
 * Number of sliding windows on a `width`×`height` image.
 *
 * # Safety
 * `out` must be writable.
 */
enum PizaStatus piza_window_count(uint32_t width,
                                  uint32_t height,
                                  uint32_t size,
                                  uint32_t stride,
                                  size_t *out);

struct PizaGenParams piza_gen_params_default(void);

/**
 * Fits a prior on area ratios; `bandwidth <= 0` selects Silverman's rule.
 *
 * # Safety
 * `ratios` must be valid for `n` values and `out` writable.
 */
enum PizaStatus piza_prior_fit(const double *ratios,
                               size_t n,
                               double bandwidth,
                               struct PizaPrior **out);

/**
 * Loads a prior written by `piza fit-prior`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum PizaStatus piza_prior_load(const char *path, struct PizaPrior **out);

/**
 * # Safety
 * `prior` must come from this library and not be used afterwards.
 */
void piza_prior_free(struct PizaPrior *prior);

/**
 * Generates the ground-truth zoom path `b_0 ⊇ … ⊇ b_T = gt` into `out`.
 * `*len_out` receives the box count even when `cap` is too small.
 *
 * # Safety
 * Pointers must be valid; `out` must hold `cap` boxes.
 */
enum PizaStatus piza_build_process(const struct PizaPrior *prior,
                                   const struct PizaGenParams *params,
                                   const struct PizaBox *gt,
                                   uint32_t width,
                                   uint32_t height,
                                   uint64_t seed,
                                   struct PizaBox *out,
                                   size_t cap,
                                   size_t *len_out);

/**
 * Loads a checkpoint written by `piza train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum PizaStatus piza_model_load(const char *path, struct PizaModel **out);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void piza_model_free(struct PizaModel *model);

/**
 * 1 when the model carries the zoom module, 0 otherwise or for null.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
uint8_t piza_model_has_zoom(const struct PizaModel *model);

/**
 * Localizes `expression` in a row-major RGB8 image. Models with the zoom
 * module search iteratively (`max_steps`, `eos_threshold`); others predict
 * once. Writes the path of boxes, the answer last.
 *
 * # Safety
 * `rgb` must hold `width * height * 3` bytes, `expression` must be
 * NUL-terminated and `out` must hold `cap` boxes.
 */
enum PizaStatus piza_model_localize(const struct PizaModel *model,
                                    const uint8_t *rgb,
                                    uint32_t width,
                                    uint32_t height,
                                    const char *expression,
                                    uint32_t max_steps,
                                    double eos_threshold,
                                    struct PizaBox *out,
                                    size_t cap,
                                    size_t *len_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PIZA_H */
