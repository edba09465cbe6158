#ifndef MIXLAB_H
#define MIXLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MixStatus {
  MIX_STATUS_OK = 0,
  MIX_STATUS_NULL_POINTER = 1,
  MIX_STATUS_INVALID_ARGUMENT = 2,
  MIX_STATUS_SHAPE = 3,
  MIX_STATUS_CONFIG = 4,
  MIX_STATUS_IO = 5,
  MIX_STATUS_CHECKPOINT = 6,
  MIX_STATUS_SCHEME_CONTRACT = 7,
  MIX_STATUS_NUMERIC = 8,
  MIX_STATUS_PANIC = 9,
} MixStatus;

/**
 * Opaque policy handle.
 */
typedef struct MixPolicy MixPolicy;

/**
 * Message of the last failure on this thread, or null. Valid until the next failure.
 */
const char *mix_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mix_version(void);

/**
 * Fresh policy with default sizes.
 *
 * # Safety
 * `scheme` and `arch` must be NUL-terminated strings; `out` must be writable.
 */
enum MixStatus mix_policy_new(const char *scheme,
                              const char *arch,
                              uint64_t seed,
                              struct MixPolicy **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MixStatus mix_policy_load(const char *path, struct MixPolicy **out);

/**
 * # Safety
 * `policy` must be a live handle and `path` a NUL-terminated string.
 */
enum MixStatus mix_policy_save(const struct MixPolicy *policy, const char *path);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `policy` must be null or a handle not yet freed.
 */
void mix_policy_free(struct MixPolicy *policy);

/**
 * Action chunk dimensions `(horizon, action_dim)`.
 *
 * # Safety
 * `policy` must be a live handle; the out pointers must be writable.
 */
enum MixStatus mix_policy_chunk_dims(const struct MixPolicy *policy,
                                     size_t *horizon,
                                     size_t *action_dim);

/**
 * Sample one action chunk for a single scene.
 *
 * `positions` holds `n_objects × 3` coordinates in the unit cube, `labels`
 * one label per object, `target` indexes the instructed object. `noise` and
 * `out` hold `horizon × action_dim` values.
 *
 * # Safety
 * Every pointer must be valid for the stated number of elements.
 */
enum MixStatus mix_policy_act(const struct MixPolicy *policy,
                              const double *positions,
                              const uint32_t *labels,
                              size_t n_objects,
                              size_t target,
                              const double *noise,
                              double *out,
                              size_t out_len);

/**
 * Gated fusion of semantic states with projected geometric tokens.
 *
 * Shapes: `h [b, l, d]`, `f_geo [b, n, d]`, `w_gate [2d, d]`, `w_s, w_g [d, d]`.
 * Writes the conditioning sequence `[b, l + n, d]` and, if `gate_out` is not
 * null, the gate `[b, n, d]`.
 *
 * # Safety
 * Every non-null pointer must be valid for the stated number of elements.
 */
enum MixStatus mix_gate_and_fuse(const double *h,
                                 const double *f_geo,
                                 size_t b,
                                 size_t l,
                                 size_t n,
                                 size_t d,
                                 const double *w_gate,
                                 const double *w_s,
                                 const double *w_g,
                                 double *cond_out,
                                 double *gate_out);

/**
 * Train and evaluate one configuration from `key = value` text and write the
 * run directory and report under `out_dir`.
 *
 * # Safety
 * `config_text` and `out_dir` must be NUL-terminated strings.
 */
enum MixStatus mix_run_experiment(const char *config_text, const char *out_dir);

#endif  /* MIXLAB_H */
