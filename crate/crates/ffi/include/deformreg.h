#ifndef DEFORMREG_H
#define DEFORMREG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of an FFI call.
 */
typedef enum DrStatus {
  DR_STATUS_OK = 0,
  DR_STATUS_NULL_POINTER = 1,
  DR_STATUS_INVALID_ARGUMENT = 2,
  DR_STATUS_IO = 3,
  DR_STATUS_FORMAT = 4,
  DR_STATUS_GRID_MISMATCH = 5,
  DR_STATUS_NUMERICAL = 6,
  DR_STATUS_PANIC = 7,
} DrStatus;

/**
 * Registration settings.
 */
typedef struct DrConfig DrConfig;

/**
 * Displacement field in voxel units.
 */
typedef struct DrField DrField;

/**
 * Integer label map.
 */
typedef struct DrLabelMap DrLabelMap;

/**
 * Scalar image.
 */
typedef struct DrVolume DrVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread. Never null.
 */
const char *dr_last_error_message(void);

/**
 * Loads a 3D NIfTI image (`.nii` or `.nii.gz`).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum DrStatus dr_volume_load(const char *path, struct DrVolume **out);

/**
 * Creates a volume by copying `nx*ny*nz` x-fastest floats.
 *
 * # Safety
 * `dims` and `spacing` must point to three values, `data` to the voxels.
 */
enum DrStatus dr_volume_from_data(const size_t *dims,
                                  const double *spacing,
                                  const float *data,
                                  struct DrVolume **out);

/**
 * # Safety
 * `vol` must be a live handle and `path` a NUL-terminated string.
 */
enum DrStatus dr_volume_save(const struct DrVolume *vol, const char *path);

/**
 * Writes the grid size into `dims[0..3]`.
 *
 * # Safety
 * `vol` must be a live handle and `dims` writable for three values.
 */
enum DrStatus dr_volume_dims(const struct DrVolume *vol, size_t *dims);

/**
 * Borrowed pointer to the x-fastest voxel values, valid while `vol` lives.
 * Returns null for a null handle.
 *
 * # Safety
 * `vol` must be null or a live handle.
 */
const float *dr_volume_data(const struct DrVolume *vol);

/**
 * # Safety
 * `vol` must be null or a handle not yet freed.
 */
void dr_volume_free(struct DrVolume *vol);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum DrStatus dr_labels_load(const char *path, struct DrLabelMap **out);

/**
 * # Safety
 * `labels` must be a live handle and `path` a NUL-terminated string.
 */
enum DrStatus dr_labels_save(const struct DrLabelMap *labels, const char *path);

/**
 * # Safety
 * `labels` must be a live handle and `dims` writable for three values.
 */
enum DrStatus dr_labels_dims(const struct DrLabelMap *labels, size_t *dims);

/**
 * Borrowed pointer to the x-fastest labels, valid while `labels` lives.
 *
 * # Safety
 * `labels` must be null or a live handle.
 */
const uint32_t *dr_labels_data(const struct DrLabelMap *labels);

/**
 * # Safety
 * `labels` must be null or a handle not yet freed.
 */
void dr_labels_free(struct DrLabelMap *labels);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum DrStatus dr_field_load(const char *path, struct DrField **out);

/**
 * # Safety
 * `field` must be a live handle and `path` a NUL-terminated string.
 */
enum DrStatus dr_field_save(const struct DrField *field, const char *path);

/**
 * # Safety
 * `field` must be a live handle and `dims` writable for three values.
 */
enum DrStatus dr_field_dims(const struct DrField *field, size_t *dims);

/**
 * Borrowed pointer to component `axis` (0 = x, 1 = y, 2 = z), x-fastest,
 * valid while `field` lives. Null for a null handle or a bad axis.
 *
 * # Safety
 * `field` must be null or a live handle.
 */
const float *dr_field_component(const struct DrField *field, size_t axis);

/**
 * # Safety
 * `field` must be null or a handle not yet freed.
 */
void dr_field_free(struct DrField *field);

/**
 * Default registration settings.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
enum DrStatus dr_config_new(struct DrConfig **out);

/**
 * Reads settings from a TOML file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum DrStatus dr_config_load(const char *path, struct DrConfig **out);

/**
 * Sets the similarity and smoothness weights.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum DrStatus dr_config_set_weights(struct DrConfig *cfg, double lambda0, double lambda1);

/**
 * Sets the per-voxel Adam step size.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum DrStatus dr_config_set_field_learning_rate(struct DrConfig *cfg, double lr);

/**
 * Replaces the coarse-to-fine schedule with `count` levels given as
 * downsampling factors and iteration counts, coarsest first.
 *
 * # Safety
 * `cfg` must be a live handle; `factors` and `iterations` must hold
 * `count` values each.
 */
enum DrStatus dr_config_set_levels(struct DrConfig *cfg,
                                   const size_t *factors,
                                   const size_t *iterations,
                                   size_t count);

/**
 * Turns the final bilateral refinement on (non-zero) or off (zero).
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum DrStatus dr_config_set_bilateral(struct DrConfig *cfg, int32_t enabled);

/**
 * # Safety
 * `cfg` must be null or a handle not yet freed.
 */
void dr_config_free(struct DrConfig *cfg);

/**
 * Registers `moving` onto `fixed`; the result lives on the fixed grid.
 * A null `cfg` uses the defaults.
 *
 * # Safety
 * Handles must be live (or `cfg` null) and `out` writable.
 */
enum DrStatus dr_register(const struct DrVolume *moving,
                          const struct DrVolume *fixed,
                          const struct DrConfig *cfg,
                          struct DrField **out);

/**
 * Trilinear resampling of `vol` through `field`.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
enum DrStatus dr_warp(const struct DrVolume *vol,
                      const struct DrField *field,
                      struct DrVolume **out);

/**
 * Nearest-neighbour resampling of `labels` through `field`.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
enum DrStatus dr_warp_labels(const struct DrLabelMap *labels,
                             const struct DrField *field,
                             struct DrLabelMap **out);

/**
 * Percentage of folded volume of the field.
 *
 * # Safety
 * `field` must be live and `out` writable.
 */
enum DrStatus dr_field_ndv(const struct DrField *field, double *out);

/**
 * Mean Dice over the union of foreground labels.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
enum DrStatus dr_dice_mean(const struct DrLabelMap *a, const struct DrLabelMap *b, double *out);

/**
 * Mean 95th-percentile Hausdorff distance in mm over labels present in
 * both maps. Writes NaN when no label could be scored.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
enum DrStatus dr_hd95_mean(const struct DrLabelMap *a, const struct DrLabelMap *b, double *out);

/**
 * Synthetic pair with a known answer: registering `moving` onto `fixed`
 * should recover `truth`. `kind` is 0 for spheres, 1 for blobs. Output
 * handles that are null are skipped.
 *
 * # Safety
 * `dims` must hold three values; each non-null output must be writable.
 */
enum DrStatus dr_synthetic_pair(int32_t kind,
                                const size_t *dims,
                                double max_disp,
                                uint64_t seed,
                                struct DrVolume **moving,
                                struct DrVolume **fixed,
                                struct DrLabelMap **moving_labels,
                                struct DrLabelMap **fixed_labels,
                                struct DrField **truth);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEFORMREG_H */
