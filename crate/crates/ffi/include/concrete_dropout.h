#ifndef CONCRETE_DROPOUT_H
#define CONCRETE_DROPOUT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
enum CdStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  CD_STATUS_OK = 0,
  CD_STATUS_NULL_POINTER = 1,
  CD_STATUS_DIMENSION = 2,
  CD_STATUS_ARGUMENT = 3,
  CD_STATUS_STATE = 4,
  CD_STATUS_CONFIG = 5,
  CD_STATUS_DATA = 6,
  CD_STATUS_FORMAT = 7,
  CD_STATUS_NUMERIC = 8,
  CD_STATUS_IO = 9,
  CD_STATUS_PANIC = 10,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum CdStatus CdStatus;
#else
typedef int32_t CdStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Precision handling for `cd_model_train`.
 */
enum CdPrecisionMode
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  CD_PRECISION_MODE_MAPEM = 0,
  CD_PRECISION_MODE_HETEROSCEDASTIC = 1,
  CD_PRECISION_MODE_FIXED = 2,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum CdPrecisionMode CdPrecisionMode;
#else
typedef int32_t CdPrecisionMode;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Opaque model handle.
 */
typedef struct CdModel CdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *cd_last_error_message(void);

/**
 * Relaxed drop indicator for drop probability `p`, uniform draw `u` and
 * temperature `t`.
 *
 * # Safety
 * `out` must be a valid pointer to one `double`.
 */
CdStatus cd_concrete_drop_prob(double p, double u, double t, double *out);

/**
 * Creates an MLP with `n_hidden` ReLU layers of the given widths, every
 * layer wrapped with Concrete dropout. A nonzero `heteroscedastic` adds a
 * log-variance head.
 *
 * # Safety
 * `hidden` must hold `n_hidden` values; `out` must be a valid pointer.
 */
CdStatus cd_model_new(size_t input_dim,
                      const size_t *hidden,
                      size_t n_hidden,
                      size_t output_dim,
                      int32_t heteroscedastic,
                      uint64_t seed,
                      struct CdModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void cd_model_free(struct CdModel *model);

/**
 * # Safety
 * `model` must be a valid handle and `out` a valid pointer.
 */
CdStatus cd_model_dims(const struct CdModel *model, size_t *input_dim, size_t *output_dim);

/**
 * Copies per-layer drop probabilities into `out` (capacity `cap`) and
 * stores the layer count in `len`. Fails with an argument error when
 * `cap` is too small, after setting `len`.
 *
 * # Safety
 * `model` must be valid, `out` must hold `cap` values, `len` must be valid.
 */
CdStatus cd_model_dropout_ps(const struct CdModel *model, double *out, size_t cap, size_t *len);

/**
 * Trains on `n` rows of row-major inputs `x` (`n × input_dim`) and targets
 * `y` (`n × output_dim`). `precision_mode` takes a `CdPrecisionMode`
 * value. `final_loss` may be null.
 *
 * # Safety
 * `model` must be valid; `x` and `y` must hold the stated number of values.
 */
CdStatus cd_model_train(struct CdModel *model,
                        const double *x,
                        const double *y,
                        size_t n,
                        double lengthscale,
                        int32_t precision_mode,
                        size_t epochs,
                        size_t batch_size,
                        double learning_rate,
                        uint64_t seed,
                        double *final_loss);

/**
 * Monte-Carlo prediction with `samples` mask draws. Each output buffer
 * holds `n × output_dim` values: predictive mean, epistemic variance and
 * aleatoric variance. `samples` must be at least 2.
 *
 * # Safety
 * `model` must be valid and every buffer must hold the stated number of values.
 */
CdStatus cd_model_predict_mc(const struct CdModel *model,
                             const double *x,
                             size_t n,
                             size_t samples,
                             uint64_t seed,
                             double *mean,
                             double *epistemic_var,
                             double *aleatoric_var);

/**
 * Writes a binary checkpoint.
 *
 * # Safety
 * `model` must be valid and `file` a NUL-terminated string.
 */
CdStatus cd_model_save(const struct CdModel *model, const char *file);

/**
 * Reads a checkpoint into a new handle.
 *
 * # Safety
 * `file` must be a NUL-terminated string and `out` a valid pointer.
 */
CdStatus cd_model_load(const char *file, struct CdModel **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONCRETE_DROPOUT_H */
