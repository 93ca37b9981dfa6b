#ifndef VESSELFORGE_H
#define VESSELFORGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VfStatus {
  VF_STATUS_OK = 0,
  /**
   * Null pointer, zero size or out-of-range argument.
   */
  VF_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Bad configuration, stride, element or tiling.
   */
  VF_STATUS_CONFIG = 2,
  /**
   * Missing or unreadable file.
   */
  VF_STATUS_IO = 3,
  /**
   * Malformed file contents.
   */
  VF_STATUS_FORMAT = 4,
  /**
   * Shapes or dimensions do not fit together.
   */
  VF_STATUS_SHAPE = 5,
  /**
   * NaN/inf encountered or metric undefined for the input.
   */
  VF_STATUS_NUMERICAL = 6,
  /**
   * Panic or other unexpected failure.
   */
  VF_STATUS_INTERNAL = 7,
} VfStatus;

/**
 * Trained network loaded from a weight file.
 */
typedef struct VfModel VfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes). Returns the full message length in bytes;
 * pass a null `buf` to query it.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t vf_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *vf_version(void);

/**
 * Trainable parameter count of the network with `base_channels` first-level filters.
 *
 * # Safety
 * `count` must be a valid pointer.
 */
enum VfStatus vf_param_count(size_t base_channels, size_t *count);

/**
 * Number of patches the strided test grid places on an `image_h`×`image_w` image.
 *
 * # Safety
 * `count` must be a valid pointer.
 */
enum VfStatus vf_test_grid_count(size_t image_h,
                                 size_t image_w,
                                 size_t patch_h,
                                 size_t patch_w,
                                 int64_t stride,
                                 size_t *count);

/**
 * Default preprocessing (grayscale, negate, top-hat, CLAHE) of an interleaved
 * 8-bit image with 1 or 3 channels. `dst` receives `width * height` bytes.
 *
 * # Safety
 * `src` must hold `width * height * channels` bytes and `dst` `width * height`.
 */
enum VfStatus vf_preprocess(const uint8_t *src,
                            size_t width,
                            size_t height,
                            uint8_t channels,
                            uint8_t *dst);

/**
 * Area under the ROC curve of `scores` against binary `labels` (non-zero = vessel).
 *
 * # Safety
 * `scores` and `labels` must each hold `n` elements; `auc` must be valid.
 */
enum VfStatus vf_roc_auc(const float *scores, const uint8_t *labels, size_t n, double *auc);

/**
 * Loads a weight file; the architecture is inferred from the tensors it holds.
 * Free the handle with [`vf_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `model` a valid pointer.
 */
enum VfStatus vf_model_load(const char *path, struct VfModel **model);

/**
 * # Safety
 * `model` must be null or a handle from [`vf_model_load`] not yet freed.
 */
void vf_model_free(struct VfModel *model);

/**
 * First-level filter count of a loaded model.
 *
 * # Safety
 * `model` must be a live handle and `base_channels` a valid pointer.
 */
enum VfStatus vf_model_base_channels(const struct VfModel *model, size_t *base_channels);

/**
 * Vessel probabilities for a preprocessed single-channel image, computed
 * over a strided grid of `patch`×`patch` tiles. `probs` receives
 * `width * height` values in `[0, 1]`, row-major.
 *
 * # Safety
 * `model` must be a live handle, `image` must hold `width * height` bytes and
 * `probs` `width * height` floats.
 */
enum VfStatus vf_model_predict(const struct VfModel *model,
                               const uint8_t *image,
                               size_t width,
                               size_t height,
                               size_t patch,
                               int64_t stride,
                               float *probs);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VESSELFORGE_H */
