#ifndef BOLTZGEN_H
#define BOLTZGEN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum BgStatus {
  BG_STATUS_OK = 0,
  BG_STATUS_NULL_POINTER = 1,
  BG_STATUS_INVALID_ARGUMENT = 2,
  BG_STATUS_IO = 3,
  BG_STATUS_PARSE = 4,
  BG_STATUS_NUMERICAL = 5,
  BG_STATUS_PANIC = 6,
} BgStatus;

/**
 * A trained flow loaded from a checkpoint.
 */
typedef struct BgFlow BgFlow;

/**
 * A potential energy function.
 */
typedef struct BgPotential BgPotential;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next failing call on the same thread.
 */
const char *bg_last_error(void);

/**
 * Loads a flow checkpoint (JSON) from `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum BgStatus bg_flow_load(const char *path, struct BgFlow **out);

/**
 * # Safety
 * `flow` must come from [`bg_flow_load`] and not be used afterwards.
 */
void bg_flow_free(struct BgFlow *flow);

/**
 * Dimension of the flow, or 0 for a null handle.
 *
 * # Safety
 * `flow` must be null or a live handle.
 */
size_t bg_flow_dim(const struct BgFlow *flow);

/**
 * Log density at `n` row-major points of the flow's dimension.
 *
 * # Safety
 * `x` must hold `n * dim` values and `out` room for `n`.
 */
enum BgStatus bg_flow_log_prob(const struct BgFlow *flow, const double *x, size_t n, double *out);

/**
 * Maps `n` data-space points to the prior, writing latents and log|det|.
 *
 * # Safety
 * `x` and `z` must hold `n * dim` values, `logdet` room for `n` (or null).
 */
enum BgStatus bg_flow_inverse(const struct BgFlow *flow,
                              const double *x,
                              size_t n,
                              double *z,
                              double *logdet);

/**
 * Draws `n` samples (row-major) with the given seed.
 *
 * # Safety
 * `out` must have room for `n * dim` values.
 */
enum BgStatus bg_flow_sample(const struct BgFlow *flow, size_t n, uint64_t seed, double *out);

/**
 * Parses a potential from a TOML table, e.g.
 * `kind = "double_well"` plus `domain = { lower = [...], upper = [...] }`.
 *
 * # Safety
 * `toml_text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum BgStatus bg_potential_from_toml(const char *toml_text, struct BgPotential **out);

/**
 * # Safety
 * `potential` must come from [`bg_potential_from_toml`] and not be used afterwards.
 */
void bg_potential_free(struct BgPotential *potential);

/**
 * # Safety
 * `potential` must be null or a live handle.
 */
size_t bg_potential_dim(const struct BgPotential *potential);

/**
 * Energy at one point; may be `+inf` on the collision set.
 *
 * # Safety
 * `x` must hold `dim` values and `out` be a valid pointer.
 */
enum BgStatus bg_potential_energy(const struct BgPotential *potential,
                                  const double *x,
                                  double *out);

/**
 * Gradient at one point.
 *
 * # Safety
 * `x` and `grad` must hold `dim` values.
 */
enum BgStatus bg_potential_gradient(const struct BgPotential *potential,
                                    const double *x,
                                    double *grad);

/**
 * Exact-assignment W2 between two row-major point sets, each subsampled
 * to `n_sub` points.
 *
 * # Safety
 * `a` must hold `na * dim` values and `b` `nb * dim`; `out` must be valid.
 */
enum BgStatus bg_w2_exact(const double *a,
                          size_t na,
                          const double *b,
                          size_t nb,
                          size_t dim,
                          size_t n_sub,
                          uint64_t seed,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BOLTZGEN_H */
