#ifndef CHESTDIFF_H
#define CHESTDIFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes; nonzero values match the command-line exit codes where
 * they overlap.
 */
typedef enum CdStatus {
  CD_STATUS_OK = 0,
  CD_STATUS_CONFIG = 2,
  CD_STATUS_MISSING_PREREQUISITE = 3,
  CD_STATUS_IO = 4,
  CD_STATUS_NUMERIC = 5,
  CD_STATUS_NULL_ARGUMENT = 6,
  CD_STATUS_BUFFER_TOO_SMALL = 7,
  CD_STATUS_PANIC = 8,
} CdStatus;

/**
 * Loaded clip, autoencoder and denoiser checkpoints.
 */
typedef struct CdPipeline CdPipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`) and returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t cd_last_error(char *buf, size_t len);

/**
 * Loads the three generation checkpoints from `ckpt_dir`.
 *
 * # Safety
 * `ckpt_dir` must be a NUL-terminated string; `out` must be writable.
 */
enum CdStatus cd_pipeline_load(const char *ckpt_dir, struct CdPipeline **out);

/**
 * Releases a pipeline. Null is ignored.
 *
 * # Safety
 * `p` must come from [`cd_pipeline_load`] and not be used afterwards.
 */
void cd_pipeline_free(struct CdPipeline *p);

/**
 * Side length of generated images, or 0 for a null handle.
 *
 * # Safety
 * `p` must be null or a live pipeline handle.
 */
size_t cd_pipeline_image_size(const struct CdPipeline *p);

/**
 * Generates one 8-bit grayscale image, row-major, into `pixels`.
 * `eta` = 0 is deterministic sampling.
 *
 * # Safety
 * `p` must be a live handle, `report` NUL-terminated, and `pixels` must
 * point to `len` writable bytes.
 */
enum CdStatus cd_pipeline_generate(const struct CdPipeline *p,
                                   const char *report,
                                   uint64_t seed,
                                   size_t steps,
                                   double eta,
                                   uint8_t *pixels,
                                   size_t len);

/**
 * Area under the ROC curve with ties counted one half. `labels` holds 0 or 1.
 *
 * # Safety
 * `scores` and `labels` must point to `n` readable elements; `out` must be writable.
 */
enum CdStatus cd_auroc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Fréchet distance between Gaussians fitted to two row-major feature
 * matrices with `dim` columns.
 *
 * # Safety
 * `a` must point to `na * dim` and `b` to `nb * dim` readable values; `out`
 * must be writable.
 */
enum CdStatus cd_frechet_distance(const double *a,
                                  size_t na,
                                  const double *b,
                                  size_t nb,
                                  size_t dim,
                                  double *out);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cd_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CHESTDIFF_H */
