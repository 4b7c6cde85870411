#ifndef MATCHPOINTS_H
#define MATCHPOINTS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Length of one descriptor in doubles.
 */
#define MP_DESCRIPTOR_LEN 128

/**
 * Result code of every exported function.
 */
typedef enum MpStatus {
  MP_STATUS_OK = 0,
  MP_STATUS_INVALID_ARGUMENT = 1,
  MP_STATUS_IO = 2,
  MP_STATUS_FORMAT = 3,
  /**
   * The pipeline ran but produced no acceptable homography.
   */
  MP_STATUS_REGISTRATION_FAILED = 4,
  /**
   * The output buffer is smaller than the result; the required size was written.
   */
  MP_STATUS_BUFFER_TOO_SMALL = 5,
  MP_STATUS_INTERNAL = 6,
} MpStatus;

/**
 * Opaque detector handle.
 */
typedef struct MpDetector MpDetector;

typedef struct MpKeypoint {
  uint32_t x;
  uint32_t y;
  double score;
} MpKeypoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread (empty after success).
 * The pointer stays valid until the next call on the same thread.
 */
const char *mp_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mp_version(void);

/**
 * Loads a detector from a checkpoint with default NMS settings.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MpStatus mp_detector_load(const char *path, struct MpDetector **out);

/**
 * Releases a detector. Null is ignored.
 *
 * # Safety
 * `det` must be null or a handle from [`mp_detector_load`] not yet freed.
 */
void mp_detector_free(struct MpDetector *det);

/**
 * Sets the NMS radius, score threshold and keypoint budget.
 *
 * # Safety
 * `det` must be a live handle.
 */
enum MpStatus mp_detector_set_nms(struct MpDetector *det,
                                  size_t window,
                                  double threshold,
                                  size_t max_keypoints);

/**
 * Detects and describes keypoints. `out_count` receives the number found.
 * When `capacity` is too small nothing else is written and
 * `BufferTooSmall` is returned. `out_descriptors` may be null; otherwise
 * it must hold `capacity * MP_DESCRIPTOR_LEN` doubles.
 *
 * # Safety
 * All pointers must be valid for the sizes given.
 */
enum MpStatus mp_detect(const struct MpDetector *det,
                        const double *pixels,
                        size_t width,
                        size_t height,
                        struct MpKeypoint *out_keypoints,
                        double *out_descriptors,
                        size_t capacity,
                        size_t *out_count);

/**
 * Estimates the homography mapping image A onto image B (row-major into
 * `out_h[9]`). `out_inliers` may be null. Returns `RegistrationFailed`
 * when no model is found or the model breaks the flip/scale rules.
 *
 * # Safety
 * Image pointers must hold `width * height` doubles; `out_h` must hold 9.
 */
enum MpStatus mp_register(const struct MpDetector *det,
                          const double *a_pixels,
                          size_t a_width,
                          size_t a_height,
                          const double *b_pixels,
                          size_t b_width,
                          size_t b_height,
                          uint64_t seed,
                          double *out_h,
                          size_t *out_inliers);

/**
 * Reads a nine-number homography file into `out_h[9]`.
 *
 * # Safety
 * `path` must be NUL-terminated; `out_h` must hold 9 doubles.
 */
enum MpStatus mp_homography_read(const char *path, double *out_h);

/**
 * Writes `h[9]` (row-major) as a homography file.
 *
 * # Safety
 * `path` must be NUL-terminated; `h` must hold 9 doubles.
 */
enum MpStatus mp_homography_write(const char *path, const double *h);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MATCHPOINTS_H */
