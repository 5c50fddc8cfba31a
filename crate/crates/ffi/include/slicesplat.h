/* C interface for the slicesplat volume reconstruction library. */

#ifndef SLICESPLAT_H
#define SLICESPLAT_H

/* Generated by cbindgen from the slicesplat-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Parameter array selector for [`ss_cloud_params`].
 */
typedef enum {
  /**
   * N x 3 world means.
   */
  SS_PARAM_ARRAY_MEANS = 0,
  /**
   * N x 3 log scales.
   */
  SS_PARAM_ARRAY_LOG_SCALES = 1,
  /**
   * N x 4 quaternions (w, x, y, z).
   */
  SS_PARAM_ARRAY_QUATS = 2,
  /**
   * N opacity logits.
   */
  SS_PARAM_ARRAY_OPACITY_LOGITS = 3,
  /**
   * N intensities.
   */
  SS_PARAM_ARRAY_INTENSITIES = 4,
} SsParamArray;

/**
 * Result code of every fallible call.
 */
typedef enum {
  SS_STATUS_OK = 0,
  SS_STATUS_NULL_ARGUMENT = 1,
  SS_STATUS_INVALID_ARGUMENT = 2,
  SS_STATUS_IO_ERROR = 3,
  SS_STATUS_FORMAT_ERROR = 4,
  SS_STATUS_DEGENERATE_INPUT = 5,
  SS_STATUS_INTERNAL_ERROR = 6,
} SsStatus;

/**
 * Opaque handle to a Gaussian scene.
 */
typedef struct SsCloud SsCloud;

/**
 * Opaque handle to an ordered set of posed slices.
 */
typedef struct SsStack SsStack;

/**
 * Opaque handle to an exported dense volume.
 */
typedef struct SsVolume SsVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; never freed by the caller.
 */
const char *ss_version(void);

/**
 * Message of the most recent failure on this thread. Valid until the next
 * failing call on the same thread; never freed by the caller.
 */
const char *ss_last_error_message(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must be null or a pointer previously returned by a `ss_*` function
 * documented to require [`ss_string_free`], not yet freed.
 */
void ss_string_free(char *s);

/**
 * Loads a stack directory into a new handle.
 *
 * # Safety
 * `dir` must be a valid C string; `out` must be a valid pointer.
 */
SsStatus ss_stack_load(const char *dir, SsStack **out);

/**
 * Writes a stack to a directory.
 *
 * # Safety
 * `stack` must be a live handle from this library; `dir` a valid C string.
 */
SsStatus ss_stack_save(const SsStack *stack, const char *dir);

/**
 * Generates a phantom and extracts one sweep, all from a run-config JSON
 * document (the same schema the CLI accepts).
 *
 * # Safety
 * `config_json` must be a valid C string; `out` a valid pointer.
 */
SsStatus ss_stack_from_phantom(const char *config_json, SsStack **out);

/**
 * # Safety
 * `stack` must be null or a live handle; double frees are undefined.
 */
void ss_stack_free(SsStack *stack);

/**
 * # Safety
 * `stack` must be a live handle.
 */
uintptr_t ss_stack_slice_count(const SsStack *stack);

/**
 * # Safety
 * `stack` must be a live handle.
 */
uintptr_t ss_stack_width(const SsStack *stack);

/**
 * # Safety
 * `stack` must be a live handle.
 */
uintptr_t ss_stack_height(const SsStack *stack);

/**
 * Copies one slice's pixels (row-major, width*height floats) into `buf`.
 *
 * # Safety
 * `stack` must be a live handle; `buf` must point to at least `buf_len`
 * floats.
 */
SsStatus ss_stack_image(const SsStack *stack, uintptr_t index, float *buf, uintptr_t buf_len);

/**
 * Loads a cloud checkpoint.
 *
 * # Safety
 * `path` must be a valid C string; `out` a valid pointer.
 */
SsStatus ss_cloud_load(const char *path, SsCloud **out);

/**
 * Saves a cloud checkpoint (without trainer state).
 *
 * # Safety
 * `cloud` must be a live handle; `path` a valid C string.
 */
SsStatus ss_cloud_save(const SsCloud *cloud, const char *path);

/**
 * # Safety
 * `cloud` must be null or a live handle; double frees are undefined.
 */
void ss_cloud_free(SsCloud *cloud);

/**
 * # Safety
 * `cloud` must be a live handle.
 */
uintptr_t ss_cloud_len(const SsCloud *cloud);

/**
 * Copies one parameter array (f64, layout per [`SsParamArray`]) into
 * `buf`; writes the required length to `len_out` and copies only when
 * `buf_len` suffices. Call with `buf = NULL` to query the length.
 *
 * # Safety
 * `cloud` must be a live handle; `buf` null or valid for `buf_len`
 * doubles; `len_out` null or a valid pointer.
 */
SsStatus ss_cloud_params(const SsCloud *cloud,
                         SsParamArray which,
                         double *buf,
                         uintptr_t buf_len,
                         uintptr_t *len_out);

/**
 * Builds an initial cloud for a stack from a run-config JSON document
 * (its `init` section and the train seed drive placement).
 *
 * # Safety
 * `config_json` must be a valid C string; `stack` a live handle; `out` a
 * valid pointer.
 */
SsStatus ss_cloud_init(const char *config_json, const SsStack *stack, SsCloud **out);

/**
 * Trains `init_cloud` against `stack` under a train-config JSON document,
 * producing a new cloud handle. When `report_json_out` is non-null it
 * receives a JSON summary (release with [`ss_string_free`]).
 *
 * # Safety
 * `train_config_json` must be a valid C string; `stack` and `init_cloud`
 * live handles; `out` a valid pointer; `report_json_out` null or valid.
 */
SsStatus ss_train(const char *train_config_json,
                  const SsStack *stack,
                  const SsCloud *init_cloud,
                  SsCloud **out,
                  char **report_json_out);

/**
 * Renders one slice plane. `pose6` is `[rx, ry, rz, tx, ty, tz]` (radians;
 * translation applied before rotation), `extent` is `[ax, bx, ay, by]`,
 * `cutoff_chi2 <= 0` selects exact mode. `buf` receives width*height
 * doubles, row-major.
 *
 * # Safety
 * `cloud` must be a live handle; `pose6`/`extent` must point to 6 and 4
 * doubles; `buf` must hold `buf_len >= width*height` doubles.
 */
SsStatus ss_render_slice(const SsCloud *cloud,
                         const double *pose6,
                         uintptr_t width,
                         uintptr_t height,
                         const double *extent,
                         double cutoff_chi2,
                         double *buf,
                         uintptr_t buf_len);

/**
 * Scores a cloud against a stack; returns a JSON document with per-slice
 * and mean metrics (release with [`ss_string_free`]).
 *
 * # Safety
 * `cloud` and `stack` must be live handles; `json_out` a valid pointer.
 */
SsStatus ss_evaluate(const SsCloud *cloud, const SsStack *stack, char **json_out);

/**
 * Samples the cloud onto a dense grid over `[min3, max3]`.
 *
 * # Safety
 * `cloud` must be a live handle; `min3`/`max3` must point to 3 doubles;
 * `res3` to 3 usizes; `out` must be valid.
 */
SsStatus ss_export_volume(const SsCloud *cloud,
                          const double *min3,
                          const double *max3,
                          const uintptr_t *res3,
                          SsVolume **out);

/**
 * # Safety
 * `vol` must be null or a live handle; double frees are undefined.
 */
void ss_volume_free(SsVolume *vol);

/**
 * Writes the volume's dimensions into `dim3`.
 *
 * # Safety
 * `vol` must be a live handle; `dim3` must point to 3 usizes.
 */
SsStatus ss_volume_dim(const SsVolume *vol, uintptr_t *dim3);

/**
 * Copies the volume's voxels (f32, x fastest) into `buf`.
 *
 * # Safety
 * `vol` must be a live handle; `buf` must hold `buf_len` floats.
 */
SsStatus ss_volume_data(const SsVolume *vol, float *buf, uintptr_t buf_len);

/**
 * Saves the volume in the binary grid format.
 *
 * # Safety
 * `vol` must be a live handle; `path` a valid C string.
 */
SsStatus ss_volume_save(const SsVolume *vol, const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SLICESPLAT_H */
