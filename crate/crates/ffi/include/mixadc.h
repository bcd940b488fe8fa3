#ifndef MIXADC_H
#define MIXADC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MixadcConstellation {
  MIXADC_CONSTELLATION_QPSK = 0,
  MIXADC_CONSTELLATION_QAM16 = 1,
} MixadcConstellation;

typedef enum MixadcStatus {
  MIXADC_STATUS_OK = 0,
  MIXADC_STATUS_NULL_POINTER = 1,
  MIXADC_STATUS_INVALID_ARGUMENT = 2,
  MIXADC_STATUS_IO = 3,
  MIXADC_STATUS_CORRUPT_BUNDLE = 4,
  MIXADC_STATUS_VERSION_MISMATCH = 5,
  MIXADC_STATUS_SHAPE = 6,
  MIXADC_STATUS_PANIC = 7,
  MIXADC_STATUS_INTERNAL = 8,
} MixadcStatus;

/**
 * Opaque handle to a deployed estimator.
 */
typedef struct MixadcEstimator MixadcEstimator;

/**
 * Problem sizes of a loaded estimator.
 */
typedef struct MixadcDims {
  /**
   * Receive antennas.
   */
  size_t m;
  /**
   * Users.
   */
  size_t k;
  /**
   * Pilot length.
   */
  size_t np;
  /**
   * Antennas with full-resolution converters.
   */
  size_t m_a;
} MixadcDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *mixadc_last_error_message(void);

/**
 * Loads a bundle written by `mixadc train`. On success `*out` owns a handle
 * that must be released with [`mixadc_estimator_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MixadcStatus mixadc_estimator_load(const char *path, struct MixadcEstimator **out);

/**
 * Releases a handle from [`mixadc_estimator_load`]; null is ignored.
 *
 * # Safety
 * `est` must be null or a handle not yet freed.
 */
void mixadc_estimator_free(struct MixadcEstimator *est);

/**
 * # Safety
 * `est` and `out` must be valid pointers.
 */
enum MixadcStatus mixadc_estimator_dims(const struct MixadcEstimator *est, struct MixadcDims *out);

/**
 * Copies the power-normalized real pilot, `2K × Np` row-major.
 *
 * # Safety
 * `out` must point to `len` writable doubles.
 */
enum MixadcStatus mixadc_estimator_pilot(const struct MixadcEstimator *est,
                                         double *out,
                                         size_t len);

/**
 * Writes 1 for antennas with full-resolution converters and 0 for one-bit
 * antennas, `M` entries.
 *
 * # Safety
 * `flags` must point to `len` writable bytes.
 */
enum MixadcStatus mixadc_estimator_selection(const struct MixadcEstimator *est,
                                             uint8_t *flags,
                                             size_t len);

/**
 * Channel estimates from `n` unquantized received pilot blocks
 * `Z̃ ∈ R^{2M×Np}` (row-major, `n·2M·Np` doubles). The estimator applies its
 * own allocation: full-resolution rows pass through, the others are reduced
 * to their signs. `out` receives `n·2M·K` doubles: per sample, the first `K`
 * columns of the real-stacked channel.
 *
 * # Safety
 * `z` must point to `z_len` readable and `out` to `out_len` writable doubles.
 */
enum MixadcStatus mixadc_estimator_estimate(const struct MixadcEstimator *est,
                                            const double *z,
                                            size_t z_len,
                                            size_t n,
                                            double *out,
                                            size_t out_len);

/**
 * Relaxed maximum-likelihood detection of one payload vector.
 *
 * `h` is the real-stacked channel `H̃ ∈ R^{2M×2K}` (row-major), `y` the
 * received `2M` vector (signs on one-bit rows), `full` the per-antenna
 * full-resolution flags (`M` bytes). Writes `K` constellation labels
 * (Gray-mapped, most significant bit on the in-phase axis).
 *
 * # Safety
 * All pointers must reference buffers of the stated lengths.
 */
enum MixadcStatus mixadc_detect_nml(const double *h,
                                    size_t m,
                                    size_t k,
                                    const double *y,
                                    const uint8_t *full,
                                    double sigma2,
                                    double rho,
                                    enum MixadcConstellation constellation,
                                    uint32_t *labels);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIXADC_H */
