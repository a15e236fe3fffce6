#ifndef ADVPATCH_H
#define ADVPATCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. `ADV_STATUS_OK` is zero; everything else is a failure.
 */
typedef enum AdvStatus {
  ADV_STATUS_OK = 0,
  ADV_STATUS_NULL_POINTER = 1,
  ADV_STATUS_INVALID_ARGUMENT = 2,
  ADV_STATUS_CONFIG = 3,
  ADV_STATUS_IO = 4,
  ADV_STATUS_SHAPE = 5,
  ADV_STATUS_WEIGHTS_LOAD = 6,
  ADV_STATUS_MISSING_TARGET = 7,
  ADV_STATUS_ROLE_VIOLATION = 8,
  ADV_STATUS_PLACEMENT = 9,
  ADV_STATUS_UNDEFINED_QUERY = 10,
  ADV_STATUS_DEPENDENCY = 11,
  ADV_STATUS_BUFFER_TOO_SMALL = 12,
  ADV_STATUS_PANIC = 13,
  ADV_STATUS_INTERNAL = 14,
} AdvStatus;

/**
 * Which side of the white-box / black-box split an embedder plays.
 */
typedef enum AdvRole {
  ADV_ROLE_TARGET_WHITEBOX = 0,
  ADV_ROLE_AUXILIARY_BLACKBOX = 1,
} AdvRole;

/**
 * Opaque trained patch generator together with its encoder.
 */
typedef struct AdvAttacker AdvAttacker;

/**
 * Opaque frozen embedder.
 */
typedef struct AdvEmbedder AdvEmbedder;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *adv_version(void);

/**
 * Copy the calling thread's last error message into `buf` (always
 * NUL-terminated when `len > 0`). Returns the full message length in bytes,
 * excluding the terminator; 0 when there is no pending error.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t adv_last_error_message(char *buf, size_t len);

/**
 * Load embedder weights (with their `.json` manifest) from `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AdvStatus adv_embedder_load(const char *path, enum AdvRole r, struct AdvEmbedder **out);

/**
 * Build a randomly initialised embedder; `arch` is `small-cnn`,
 * `residual-50` or `osnet-like`.
 *
 * # Safety
 * `arch` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AdvStatus adv_embedder_random(const char *arch,
                                   uint64_t seed,
                                   size_t height,
                                   size_t width,
                                   enum AdvRole r,
                                   struct AdvEmbedder **out);

/**
 * Release an embedder. Null is ignored.
 *
 * # Safety
 * `handle` must come from an `adv_embedder_*` constructor and not be used afterwards.
 */
void adv_embedder_free(struct AdvEmbedder *handle);

/**
 * Embedding dimension and expected input size.
 *
 * # Safety
 * `handle` must be a live embedder; output pointers must be valid.
 */
enum AdvStatus adv_embedder_info(const struct AdvEmbedder *handle,
                                 size_t *dim,
                                 size_t *height,
                                 size_t *width);

/**
 * Embed one `3 × height × width` image into `out` (`out_len ≥ dim`).
 *
 * # Safety
 * `pixels` must hold `3·height·width` floats and `out` `out_len` floats.
 */
enum AdvStatus adv_embedder_embed(const struct AdvEmbedder *handle,
                                  const float *pixels,
                                  size_t height,
                                  size_t width,
                                  float *out,
                                  size_t out_len);

/**
 * Load a generator checkpoint written by `train-generator`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AdvStatus adv_attacker_load(const char *path, struct AdvAttacker **out);

/**
 * Release an attacker. Null is ignored.
 *
 * # Safety
 * `handle` must come from [`adv_attacker_load`] and not be used afterwards.
 */
void adv_attacker_free(struct AdvAttacker *handle);

/**
 * Patch size and whether a target image is required.
 *
 * # Safety
 * `handle` must be a live attacker; output pointers must be valid.
 */
enum AdvStatus adv_attacker_info(const struct AdvAttacker *handle,
                                 size_t *patch_height,
                                 size_t *patch_width,
                                 bool *targeted);

/**
 * Generate a patch for one source (and, when targeted, one target) image
 * of the encoder's input size. Writes `3·ph·pw` floats to `out`.
 *
 * # Safety
 * `source` (and `target` when non-null) must hold `3·height·width` floats.
 */
enum AdvStatus adv_attacker_generate(const struct AdvAttacker *handle,
                                     const float *source,
                                     const float *target,
                                     size_t height,
                                     size_t width,
                                     float *out,
                                     size_t out_len);

/**
 * Paste a `3 × ph × pw` patch into a `3 × height × width` image with its
 * top-left corner at column `x`, row `y`. `out` receives the blended image.
 *
 * # Safety
 * Buffers must hold the stated number of floats.
 */
enum AdvStatus adv_compose(const float *source,
                           size_t height,
                           size_t width,
                           const float *patch,
                           size_t ph,
                           size_t pw,
                           size_t x,
                           size_t y,
                           float *out,
                           size_t out_len);

/**
 * Average precision of a ranked relevance list (nonzero = relevant).
 *
 * # Safety
 * `relevance` must hold `n` bytes; `out` must be valid.
 */
enum AdvStatus adv_average_precision(const uint8_t *relevance, size_t n, double *out);

/**
 * Fraction of the `n` row pairs whose cosine similarity exceeds `tau`.
 *
 * # Safety
 * `adversarial` and `targets` must each hold `n·dim` floats.
 */
enum AdvStatus adv_attack_success_rate(const float *adversarial,
                                       const float *targets,
                                       size_t n,
                                       size_t dim,
                                       double tau,
                                       double *out);

/**
 * Cosine similarity of two `dim`-vectors.
 *
 * # Safety
 * `a` and `b` must each hold `dim` floats.
 */
enum AdvStatus adv_cosine(const float *a, const float *b, size_t dim, double *out);

/**
 * Attack loss for one embedding triple. `target` may be null in
 * untargeted mode, where the loss is the source similarity.
 *
 * # Safety
 * Non-null vectors must hold `dim` floats.
 */
enum AdvStatus adv_attack_loss(const float *adversarial,
                               const float *source,
                               const float *target,
                               size_t dim,
                               double lambda_pull,
                               double lambda_push,
                               double tau,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADVPATCH_H */
