#ifndef SAVOS_LAB_H
#define SAVOS_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum SavosMaskKind {
  SAVOS_MASK_KIND_AMODAL = 0,
  SAVOS_MASK_KIND_VISIBLE = 1,
} SavosMaskKind;

typedef enum SavosStatus {
  SAVOS_STATUS_OK = 0,
  SAVOS_STATUS_NULL_ARGUMENT = 1,
  SAVOS_STATUS_CONFIG = 2,
  SAVOS_STATUS_CONTRACT = 3,
  SAVOS_STATUS_GENERATION = 4,
  SAVOS_STATUS_FORMAT = 5,
  SAVOS_STATUS_IO = 6,
  SAVOS_STATUS_NON_FINITE = 7,
  SAVOS_STATUS_INTERNAL = 8,
  SAVOS_STATUS_PANIC = 9,
  SAVOS_STATUS_BUFFER_TOO_SMALL = 10,
} SavosStatus;

/**
 * Opaque trained model.
 */
typedef struct SavosModelHandle SavosModelHandle;

/**
 * Opaque synthetic video.
 */
typedef struct SavosVideo SavosVideo;

typedef struct SavosDims {
  uintptr_t frames;
  uintptr_t objects;
  uintptr_t height;
  uintptr_t width;
} SavosDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *savos_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *savos_version(void);

/**
 * Generates one video. `config_toml` is a run configuration whose `[generator]`
 * section is used; null selects the 64x64 desk setting. `seed` overrides its seed.
 *
 * # Safety
 * `config_toml` is null or a NUL-terminated string; `out` is a valid pointer.
 */
enum SavosStatus savos_video_generate(const char *config_toml,
                                      uint64_t seed,
                                      struct SavosVideo **out);

/**
 * Reads a video directory written by [`savos_video_write`] or the CLI.
 *
 * # Safety
 * `dir` is a NUL-terminated string; `out` is a valid pointer.
 */
enum SavosStatus savos_video_read(const char *dir, struct SavosVideo **out);

/**
 * # Safety
 * `video` is a live handle; `dir` is a NUL-terminated string.
 */
enum SavosStatus savos_video_write(const struct SavosVideo *video, const char *dir);

/**
 * # Safety
 * `video` is null or a handle not yet freed.
 */
void savos_video_free(struct SavosVideo *video);

/**
 * # Safety
 * `video` is a live handle; `out` is a valid pointer.
 */
enum SavosStatus savos_video_dims(const struct SavosVideo *video, struct SavosDims *out);

/**
 * Copies one 0/1 mask, row-major, into `buf` (`len >= height * width`).
 *
 * # Safety
 * `video` is a live handle; `buf` points to `len` writable bytes.
 */
enum SavosStatus savos_video_copy_mask(const struct SavosVideo *video,
                                       enum SavosMaskKind kind,
                                       uintptr_t t,
                                       uintptr_t k,
                                       uint8_t *buf,
                                       uintptr_t len);

/**
 * Copies the RGB frame `t` (row-major, interleaved) into `buf` (`len >= 3 * height * width`).
 *
 * # Safety
 * `video` is a live handle; `buf` points to `len` writable bytes.
 */
enum SavosStatus savos_video_copy_frame(const struct SavosVideo *video,
                                        uintptr_t t,
                                        uint8_t *buf,
                                        uintptr_t len);

/**
 * Forward-warps a `[0, 1]` mask by a dense flow; all buffers are `height * width` floats.
 *
 * # Safety
 * Input pointers reference `height * width` readable floats, `out` as many writable ones.
 */
enum SavosStatus savos_forward_warp(const float *mask,
                                    const float *dx,
                                    const float *dy,
                                    uintptr_t height,
                                    uintptr_t width,
                                    float *out);

/**
 * Convex-hull completion of a visible mask (`height * width` bytes, nonzero = set).
 * `*defined` (may be null) is false when the visible mask was empty, leaving `out` empty.
 *
 * # Safety
 * `visible` references `height * width` readable bytes, `out` as many writable ones.
 */
enum SavosStatus savos_convex_baseline(const uint8_t *visible,
                                       uintptr_t height,
                                       uintptr_t width,
                                       uint8_t *out,
                                       bool *defined);

/**
 * Loads a checkpoint for inference.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is a valid pointer.
 */
enum SavosStatus savos_model_load(const char *path, struct SavosModelHandle **out);

/**
 * # Safety
 * `model` is null or a handle not yet freed.
 */
void savos_model_free(struct SavosModelHandle *model);

/**
 * Predicted amodal masks for every frame and object, laid out `[t][k][y][x]` as 0/1
 * bytes (`len >= frames * objects * height * width`).
 *
 * # Safety
 * `model` and `video` are live handles; `buf` points to `len` writable bytes.
 */
enum SavosStatus savos_model_predict(const struct SavosModelHandle *model,
                                     const struct SavosVideo *video,
                                     uint8_t *buf,
                                     uintptr_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAVOS_LAB_H */
