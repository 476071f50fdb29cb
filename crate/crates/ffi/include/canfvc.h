#ifndef CANFVC_H
#define CANFVC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CanfvcStatus {
  CANFVC_STATUS_OK = 0,
  CANFVC_STATUS_NULL_POINTER = 1,
  CANFVC_STATUS_INVALID_ARGUMENT = 2,
  CANFVC_STATUS_IO = 3,
  CANFVC_STATUS_CHECKPOINT = 4,
  CANFVC_STATUS_BITSTREAM = 5,
  CANFVC_STATUS_SHAPE = 6,
  CANFVC_STATUS_METRIC = 7,
  CANFVC_STATUS_NO_FRAMES = 8,
  CANFVC_STATUS_INTERNAL = 9,
  CANFVC_STATUS_PANIC = 10,
} CanfvcStatus;

/**
 * A loaded model and its rate setting.
 */
typedef struct CanfvcCodec CanfvcCodec;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next failing call on the same thread.
 */
const char *canfvc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *canfvc_version(void);

/**
 * Loads a checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CanfvcStatus canfvc_codec_open(const char *path, struct CanfvcCodec **out);

/**
 * Creates an untrained tiny model, for tests and bindings.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum CanfvcStatus canfvc_codec_new_untrained(uint32_t lambda,
                                             uint64_t seed,
                                             struct CanfvcCodec **out);

/**
 * # Safety
 * `codec` must come from this library and not be used afterwards. Null is
 * accepted.
 */
void canfvc_codec_free(struct CanfvcCodec *codec);

/**
 * λ of the loaded model, 0 for a null handle.
 *
 * # Safety
 * `codec` must be null or a live handle.
 */
uint32_t canfvc_codec_lambda(const struct CanfvcCodec *codec);

/**
 * Encodes `num_frames` consecutive interleaved RGB24 frames of
 * `width × height` into a bitstream.
 *
 * # Safety
 * `rgb` must hold `3 · width · height · num_frames` bytes; `out_data` and
 * `out_len` must be valid pointers.
 */
enum CanfvcStatus canfvc_encode(const struct CanfvcCodec *codec,
                                const uint8_t *rgb,
                                uint32_t width,
                                uint32_t height,
                                uint32_t num_frames,
                                uint32_t gop,
                                uint8_t **out_data,
                                size_t *out_len);

/**
 * Decodes a bitstream into consecutive interleaved RGB24 frames.
 *
 * # Safety
 * `data` must hold `len` bytes; every output pointer must be valid.
 */
enum CanfvcStatus canfvc_decode(const struct CanfvcCodec *codec,
                                const uint8_t *data,
                                size_t len,
                                uint8_t **out_rgb,
                                size_t *out_len,
                                uint32_t *out_width,
                                uint32_t *out_height,
                                uint32_t *out_frames);

/**
 * Releases a buffer returned by this library.
 *
 * # Safety
 * `ptr` and `len` must be exactly what the library returned. Null is
 * accepted.
 */
void canfvc_buffer_free(uint8_t *ptr, size_t len);

/**
 * PSNR in dB of two 8-bit buffers of `len` samples (peak 255). Identical
 * buffers give +infinity.
 *
 * # Safety
 * `a` and `b` must hold `len` bytes; `out` must be valid.
 */
enum CanfvcStatus canfvc_psnr_rgb8(const uint8_t *a, const uint8_t *b, size_t len, double *out);

/**
 * Bjøntegaard delta rate in percent of a test curve against an anchor.
 *
 * # Safety
 * Each array must hold the stated number of points; `out` must be valid.
 */
enum CanfvcStatus canfvc_bd_rate(const double *anchor_bpp,
                                 const double *anchor_psnr,
                                 size_t anchor_len,
                                 const double *test_bpp,
                                 const double *test_psnr,
                                 size_t test_len,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CANFVC_H */
