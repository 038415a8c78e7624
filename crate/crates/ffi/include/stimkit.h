#ifndef STIMKIT_H
#define STIMKIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum StimkitStatus {
  STIMKIT_STATUS_OK = 0,
  STIMKIT_STATUS_NULL_ARGUMENT = 1,
  STIMKIT_STATUS_INVALID_ARGUMENT = 2,
  STIMKIT_STATUS_PARSE = 3,
  STIMKIT_STATUS_FORMAT = 4,
  STIMKIT_STATUS_SHAPE = 5,
  STIMKIT_STATUS_NUMERIC = 6,
  STIMKIT_STATUS_IO = 7,
  STIMKIT_STATUS_CONFIG = 8,
  /**
   * The output buffer is too small; the required count was written.
   */
  STIMKIT_STATUS_BUFFER_TOO_SMALL = 9,
  STIMKIT_STATUS_PANIC = 10,
} StimkitStatus;

/**
 * An optical-flow field: parallel sample points, vectors and validity flags.
 */
typedef struct StimkitFlow StimkitFlow;

/**
 * A trained model with the preprocessing settings it was trained with.
 */
typedef struct StimkitModel StimkitModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *stimkit_version(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next stimkit call on the same thread.
 */
const char *stimkit_last_error(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum StimkitStatus stimkit_model_load(const char *path, struct StimkitModel **out);

/**
 * Loads a checkpoint from memory.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` be a valid pointer.
 */
enum StimkitStatus stimkit_model_load_bytes(const uint8_t *data,
                                            size_t len,
                                            struct StimkitModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from a `stimkit_model_load*` call and not be used afterwards.
 */
void stimkit_model_free(struct StimkitModel *model);

/**
 * Frames, height and width of one model input window.
 *
 * # Safety
 * All pointers must be valid.
 */
enum StimkitStatus stimkit_model_input_shape(const struct StimkitModel *model,
                                             size_t *frames,
                                             size_t *height,
                                             size_t *width);

/**
 * Probability for one rasterized window: `frames * height * width` floats,
 * frame-major then row-major.
 *
 * # Safety
 * `data` must point to `len` floats; `probability` must be valid.
 */
enum StimkitStatus stimkit_model_predict_raster(const struct StimkitModel *model,
                                                const float *data,
                                                size_t len,
                                                double *probability);

/**
 * Runs the full keypoint pipeline on one clip (a consolidated keypoint file
 * or a per-frame directory) with the model's training-time settings.
 *
 * Writes one probability per window, and its first frame index when
 * `origins` is not null. `count` receives the number of windows; when it
 * exceeds `capacity` nothing is written and `BUFFER_TOO_SMALL` is returned.
 *
 * # Safety
 * `path` must be NUL-terminated; `probabilities` (and `origins` if given)
 * must hold `capacity` elements; `count` must be valid.
 */
enum StimkitStatus stimkit_model_predict_keypoints(const struct StimkitModel *model,
                                                   const char *path,
                                                   double frame_width,
                                                   double frame_height,
                                                   double *probabilities,
                                                   size_t *origins,
                                                   size_t capacity,
                                                   size_t *count);

/**
 * Sparse Lucas-Kanade flow on a lattice with the given spacing. Images are
 * `width * height` row-major intensities in [0, 1].
 *
 * # Safety
 * `prev` and `next` must hold `width * height` floats; `out` must be valid.
 */
enum StimkitStatus stimkit_flow_lucas_kanade(const float *prev,
                                             const float *next,
                                             size_t width,
                                             size_t height,
                                             size_t spacing,
                                             struct StimkitFlow **out);

/**
 * Dense Farneback flow with default parameters.
 *
 * # Safety
 * `prev` and `next` must hold `width * height` floats; `out` must be valid.
 */
enum StimkitStatus stimkit_flow_farneback(const float *prev,
                                          const float *next,
                                          size_t width,
                                          size_t height,
                                          struct StimkitFlow **out);

/**
 * Number of sample points; 0 for null.
 *
 * # Safety
 * `flow` must be null or a live flow handle.
 */
size_t stimkit_flow_len(const struct StimkitFlow *flow);

/**
 * Reads sample point `index`: its position, displacement and validity (0/1).
 *
 * # Safety
 * `flow` must be a live handle and the output pointers valid.
 */
enum StimkitStatus stimkit_flow_get(const struct StimkitFlow *flow,
                                    size_t index,
                                    double *x,
                                    double *y,
                                    double *u,
                                    double *v,
                                    uint8_t *valid);

/**
 * Releases a flow field; null is ignored.
 *
 * # Safety
 * `flow` must come from a `stimkit_flow_*` constructor and not be used afterwards.
 */
void stimkit_flow_free(struct StimkitFlow *flow);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STIMKIT_H */
