#ifndef STROKESEG_H
#define STROKESEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call. Codes 1 to 3 match the command-line exit codes.
 */
typedef enum SsStatus {
  SS_STATUS_OK = 0,
  SS_STATUS_CONFIG = 1,
  SS_STATUS_DATA = 2,
  SS_STATUS_NUMERIC = 3,
  SS_STATUS_NULL_POINTER = 10,
  SS_STATUS_INVALID_ARGUMENT = 11,
  SS_STATUS_PANIC = 12,
} SsStatus;

/**
 * A trained nine-path model with its post-processor.
 */
typedef struct SsModel SsModel;

/**
 * A 3D scalar grid, x fastest.
 */
typedef struct SsVolume SsVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message of this thread into `buf` (NUL-terminated, truncated to
 * `len`). Returns the full message length excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t ss_last_error_message(char *buf, size_t len);

/**
 * Version string of the library, static and NUL-terminated.
 */
const char *ss_version(void);

/**
 * Read an MVOL1 file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SsStatus ss_volume_read(const char *path, struct SsVolume **out);

/**
 * Write a volume as MVOL1. Masks are stored as bytes, everything else as f32.
 *
 * # Safety
 * `vol` must be a live handle and `path` a NUL-terminated string.
 */
enum SsStatus ss_volume_write(const struct SsVolume *vol, const char *path);

/**
 * Build a volume from `len = dx*dy*dz` values. `modality`: 0 T1, 1 FLAIR, 2 mask, 3 map.
 *
 * # Safety
 * `dims` and `voxel_mm` point to 3 values, `data` to `len` values; `out` is writable.
 */
enum SsStatus ss_volume_new(const size_t *dims,
                            const float *voxel_mm,
                            uint8_t modality,
                            const float *data,
                            size_t len,
                            struct SsVolume **out);

/**
 * Store the grid size in `out_dims[0..3]` as (x, y, z).
 *
 * # Safety
 * `vol` must be a live handle; `out_dims` must hold 3 values.
 */
enum SsStatus ss_volume_dims(const struct SsVolume *vol, size_t *out_dims);

/**
 * Borrowed pointer to the voxel values, valid until the handle is freed; null for a
 * null handle. `out_len` receives the value count when not null.
 *
 * # Safety
 * `vol` must be null or a live handle.
 */
const float *ss_volume_data(const struct SsVolume *vol, size_t *out_len);

/**
 * # Safety
 * `vol` must be null or a handle not yet freed.
 */
void ss_volume_free(struct SsVolume *vol);

/**
 * Synthetic phantom: T1, FLAIR and truth mask on a `dims` grid.
 *
 * # Safety
 * `dims` points to 3 values; the three out pointers are writable.
 */
enum SsStatus ss_phantom_generate(const size_t *dims,
                                  uint64_t seed,
                                  struct SsVolume **out_t1,
                                  struct SsVolume **out_flair,
                                  struct SsVolume **out_truth);

/**
 * Load a model checkpoint written by `strokeseg train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SsStatus ss_model_load(const char *path, struct SsModel **out);

/**
 * Segment `t1` with an [`SsAggregation`] value. `secondary` may be null unless the
 * model was trained bimodal.
 *
 * # Safety
 * `model` and `t1` must be live handles, `secondary` null or live, `out_mask` writable.
 */
enum SsStatus ss_model_predict(const struct SsModel *model,
                               const struct SsVolume *t1,
                               const struct SsVolume *secondary,
                               uint32_t aggregation,
                               struct SsVolume **out_mask);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void ss_model_free(struct SsModel *model);

/**
 * Dice coefficient of two masks on the same grid; 1 when both are empty.
 *
 * # Safety
 * `pred` and `truth` must be live handles; `out_dice` must be writable.
 */
enum SsStatus ss_dice(const struct SsVolume *pred, const struct SsVolume *truth, double *out_dice);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STROKESEG_H */
