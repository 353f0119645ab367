#ifndef FLOEBERG_H
#define FLOEBERG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Class value written for land pixels by [`flb_predict`].
#define FLB_NO_CLASS 255

// Number of classes in label vectors and predictions.
#define FLB_NUM_CLASSES 4

// Result codes returned by every fallible function.
typedef enum FlbStatus {
  FLB_STATUS_OK = 0,
  FLB_STATUS_NULL_ARGUMENT = 1,
  FLB_STATUS_INVALID_ARGUMENT = 2,
  FLB_STATUS_IO = 3,
  FLB_STATUS_FORMAT = 4,
  FLB_STATUS_PARSE = 5,
  FLB_STATUS_BUFFER_TOO_SMALL = 6,
  FLB_STATUS_PANIC = 7,
} FlbStatus;

// A trained model loaded from a checkpoint.
typedef struct FlbModel FlbModel;

// A loaded scene directory.
typedef struct FlbScene FlbScene;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length excluding the NUL, so
// a call with `len == 0` sizes the buffer.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t flb_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *flb_version(void);

// Loads the scene directory at `dir`.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` a valid pointer.
enum FlbStatus flb_scene_load(const char *dir, struct FlbScene **out);

// Writes the scene's height and width.
//
// # Safety
// All pointers must be valid.
enum FlbStatus flb_scene_dims(const struct FlbScene *scene, size_t *height, size_t *width);

// Releases a scene. Null is ignored.
//
// # Safety
// `scene` must come from [`flb_scene_load`] and not be used afterwards.
void flb_scene_free(struct FlbScene *scene);

// Loads a checkpoint written by `floeberg train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum FlbStatus flb_model_load(const char *path, struct FlbModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from [`flb_model_load`] and not be used afterwards.
void flb_model_free(struct FlbModel *model);

// Predicts the class map of `scene` into `out` (row-major, `height * width`
// bytes, classes 0..4 and [`FLB_NO_CLASS`] on land).
//
// The output grid is the scene downscaled by the model's training ratio.
// `height` and `width` are always written; if `out_len` is too small the
// call returns `BufferTooSmall` without running the network, so passing a
// null `out` with `out_len == 0` queries the size.
//
// # Safety
// Handles must be live, `height`/`width` valid and `out` null or pointing to
// `out_len` writable bytes.
enum FlbStatus flb_predict(const struct FlbModel *model,
                           const struct FlbScene *scene,
                           uint8_t *out,
                           size_t out_len,
                           size_t *height,
                           size_t *width);

// Converts an egg code into a class-indexed label vector
// `[water, young, first-year, multiyear]`.
//
// # Safety
// `partials` and `stages` must point to 3 bytes, `out` to 4 doubles.
enum FlbStatus flb_eggcode_to_label(uint8_t ct,
                                    const uint8_t *partials,
                                    const uint8_t *stages,
                                    double *out);

// Quantizes a label vector to the nearest egg code (tenths, thickest stage
// first).
//
// # Safety
// `label` must point to 4 doubles, `ct` to 1 byte, `partials` and `stages`
// to 3 writable bytes each.
enum FlbStatus flb_label_to_eggcode(const double *label,
                                    uint8_t *ct,
                                    uint8_t *partials,
                                    uint8_t *stages);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOEBERG_H */
