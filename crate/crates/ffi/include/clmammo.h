#ifndef CLMAMMO_H
#define CLMAMMO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ClmStatus {
  CLM_STATUS_OK = 0,
  CLM_STATUS_NULL_POINTER = 1,
  CLM_STATUS_INVALID_ARGUMENT = 2,
  CLM_STATUS_IO = 3,
  CLM_STATUS_CHECKPOINT = 4,
  CLM_STATUS_NON_FINITE = 5,
  CLM_STATUS_BUFFER_TOO_SMALL = 6,
  CLM_STATUS_PANIC = 7,
} ClmStatus;

/**
 * Loaded model plus the preprocessing it was trained with.
 */
typedef struct ClmModel ClmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`) and returns the full message length excluding NUL.
 *
 * # Safety
 * `buf` must be null or valid for `len` writes.
 */
size_t clm_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *clm_version(void);

/**
 * Load a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for one write.
 */
enum ClmStatus clm_model_load(const char *path, struct ClmModel **out);

/**
 * Release a model handle; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`clm_model_load`] not yet freed.
 */
void clm_model_free(struct ClmModel *model);

/**
 * Encoder feature dimension, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t clm_model_feature_dim(const struct ClmModel *model);

/**
 * Eval-mode features of one row-major image with pixels in `[0, 1]`.
 * `out` receives `clm_model_feature_dim` floats.
 *
 * # Safety
 * `pixels` must hold `width * height` floats and `out` `out_len` floats.
 */
enum ClmStatus clm_model_embed(const struct ClmModel *model,
                               const float *pixels,
                               size_t width,
                               size_t height,
                               float *out,
                               size_t out_len);

/**
 * Class logits (benign, malignant) and the malignant probability.
 *
 * # Safety
 * `pixels` must hold `width * height` floats, `logits` two floats and
 * `probability` one double; `logits` and `probability` may be null.
 */
enum ClmStatus clm_model_classify(const struct ClmModel *model,
                                  const float *pixels,
                                  size_t width,
                                  size_t height,
                                  float *logits,
                                  double *probability);

/**
 * Grad-CAM heatmap at image resolution. `target_class < 0` explains the
 * predicted class; the explained class is written to `out_class`.
 *
 * # Safety
 * `pixels` and `heatmap` must each hold `width * height` floats;
 * `out_class` may be null.
 */
enum ClmStatus clm_model_gradcam(const struct ClmModel *model,
                                 const float *pixels,
                                 size_t width,
                                 size_t height,
                                 int32_t target_class,
                                 float *heatmap,
                                 size_t *out_class);

/**
 * Area under the ROC curve; labels are 0 (benign) or 1 (malignant).
 *
 * # Safety
 * `scores` and `labels` must each hold `n` elements; `out` one double.
 */
enum ClmStatus clm_roc_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Mean contrastive loss over a `[rows, dim]` batch of unit-norm rows whose
 * rows `2k` and `2k+1` are positive pairs.
 *
 * # Safety
 * `z` must hold `rows * dim` floats; `out` one double.
 */
enum ClmStatus clm_nt_xent(const float *z, size_t rows, size_t dim, double tau, double *out);

/**
 * Warmup + cosine learning rate at `step`.
 *
 * # Safety
 * `out` must be valid for one write.
 */
enum ClmStatus clm_lr_at(size_t step,
                         size_t warmup_steps,
                         size_t total_steps,
                         double base_lr,
                         double final_lr,
                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLMAMMO_H */
