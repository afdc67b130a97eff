#ifndef TNBMA_H
#define TNBMA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define TNBMA_VARIANT_NAIVE 0

#define TNBMA_VARIANT_MEAN_CORRECTED 1

#define TNBMA_VARIANT_FULL_ML 2

typedef enum TnbmaStatus {
  TNBMA_STATUS_OK = 0,
  TNBMA_STATUS_NULL_POINTER = 1,
  TNBMA_STATUS_INVALID_ARGUMENT = 2,
  TNBMA_STATUS_PARSE = 3,
  TNBMA_STATUS_IO = 4,
  TNBMA_STATUS_NUMERICAL = 5,
  TNBMA_STATUS_PANIC = 6,
} TnbmaStatus;

/**
 * Opaque fitted model.
 */
typedef struct TnbmaModel TnbmaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *tnbma_last_error(void);

/**
 * Load a model from its key-value file.
 */
enum TnbmaStatus tnbma_model_load(const char *path, struct TnbmaModel **out);

/**
 * Parse a model from key-value text.
 */
enum TnbmaStatus tnbma_model_from_string(const char *text, struct TnbmaModel **out);

/**
 * Serialize a model; free the result with `tnbma_string_free`.
 */
enum TnbmaStatus tnbma_model_to_string(const struct TnbmaModel *model, char **out);

void tnbma_model_free(struct TnbmaModel *model);

void tnbma_string_free(char *s);

enum TnbmaStatus tnbma_model_member_count(const struct TnbmaModel *model, size_t *out);

enum TnbmaStatus tnbma_model_group_count(const struct TnbmaModel *model, size_t *out);

enum TnbmaStatus tnbma_model_sigma(const struct TnbmaModel *model, double *out);

/**
 * Per-member weight and location coefficients of group `group`.
 */
enum TnbmaStatus tnbma_model_group_params(const struct TnbmaModel *model,
                                          size_t group,
                                          double *weight,
                                          double *alpha,
                                          double *beta);

/**
 * Predictive density at `x` given member forecasts in model order.
 */
enum TnbmaStatus tnbma_predictive_pdf(const struct TnbmaModel *model,
                                      const double *members,
                                      size_t n_members,
                                      double x,
                                      double *out);

enum TnbmaStatus tnbma_predictive_cdf(const struct TnbmaModel *model,
                                      const double *members,
                                      size_t n_members,
                                      double x,
                                      double *out);

enum TnbmaStatus tnbma_predictive_quantile(const struct TnbmaModel *model,
                                           const double *members,
                                           size_t n_members,
                                           double p,
                                           double *out);

/**
 * CRPS of the predictive against observation `x`.
 */
enum TnbmaStatus tnbma_predictive_crps(const struct TnbmaModel *model,
                                       const double *members,
                                       size_t n_members,
                                       double x,
                                       double *out);

/**
 * Fit a model by EM.
 *
 * `groups` is `two-group`, `three-group` or `id:n,...`. `forecasts` is row-major
 * `n_cases` x `n_members`. `converged` may be null.
 */
enum TnbmaStatus tnbma_fit(const char *groups,
                           uint32_t variant,
                           const double *forecasts,
                           const double *observations,
                           size_t n_cases,
                           size_t n_members,
                           struct TnbmaModel **out,
                           bool *converged);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TNBMA_H */
