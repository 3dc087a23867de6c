#ifndef MELFLOW_H
#define MELFLOW_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Zero is success.
typedef enum MfStatus {
  MF_STATUS_OK = 0,
  MF_STATUS_NULL_POINTER = 1,
  MF_STATUS_INVALID_UTF8 = 2,
  MF_STATUS_INVALID_ARGUMENT = 3,
  MF_STATUS_SHAPE = 4,
  MF_STATUS_OVER_BUDGET = 5,
  MF_STATUS_UNKNOWN_SPEAKER = 6,
  MF_STATUS_CHECKPOINT = 7,
  MF_STATUS_CONFIG = 8,
  MF_STATUS_IO = 9,
  MF_STATUS_NON_FINITE = 10,
  MF_STATUS_BUFFER_TOO_SMALL = 11,
  MF_STATUS_PANIC = 12,
  MF_STATUS_OTHER = 13,
} MfStatus;

// A mel spectrogram, frames × bins.
typedef struct MfMel MfMel;

// A loaded model checkpoint.
typedef struct MfModel MfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. Owned by the
// library; valid until the next failing call on this thread.
const char *mf_last_error(void);

// Library version as a static NUL-terminated string.
const char *mf_version(void);

// Loads a model checkpoint written by `melflow train`.
//
// # Safety
// `path` must be a valid NUL-terminated string; `out` a writable pointer.
enum MfStatus mf_model_load(const char *path, struct MfModel **out);

// # Safety
// `model` must come from `mf_model_load` and not be used afterwards.
void mf_model_free(struct MfModel *model);

// Generates `duration_s` seconds for a prompt. `speaker_id < 0` means no
// speaker.
//
// # Safety
// Pointers must be valid; strings NUL-terminated.
enum MfStatus mf_sample(const struct MfModel *model,
                        const char *tags,
                        const char *lyrics,
                        int32_t speaker_id,
                        double duration_s,
                        uint64_t seed,
                        struct MfMel **out);

// Regenerates `[start_s, end_s)` of `mel` under a new prompt.
//
// # Safety
// Pointers must be valid; strings NUL-terminated.
enum MfStatus mf_repaint(const struct MfModel *model,
                         const struct MfMel *mel,
                         double start_s,
                         double end_s,
                         const char *tags,
                         const char *lyrics,
                         int32_t speaker_id,
                         uint64_t seed,
                         struct MfMel **out);

// Rewrites the lyrics of `mel` from `lyrics_src` to `lyrics_tgt`.
//
// # Safety
// Pointers must be valid; strings NUL-terminated.
enum MfStatus mf_edit(const struct MfModel *model,
                      const struct MfMel *mel,
                      const char *tags,
                      const char *lyrics_src,
                      const char *lyrics_tgt,
                      int32_t speaker_id,
                      uint64_t seed,
                      struct MfMel **out);

// Reads a mel file.
//
// # Safety
// `path` must be NUL-terminated; `out` writable.
enum MfStatus mf_mel_load(const char *path, struct MfMel **out);

// Writes a mel file.
//
// # Safety
// `mel` must be a live handle; `path` NUL-terminated.
enum MfStatus mf_mel_save(const struct MfMel *mel, const char *path);

// Builds a mel from `frames × bins` row-major values.
//
// # Safety
// `data` must point to `frames * bins` floats.
enum MfStatus mf_mel_from_data(const float *data,
                               size_t frames,
                               size_t bins,
                               double frame_rate_hz,
                               struct MfMel **out);

// # Safety
// `mel` must be a live handle or null.
size_t mf_mel_frames(const struct MfMel *mel);

// # Safety
// `mel` must be a live handle or null.
size_t mf_mel_bins(const struct MfMel *mel);

// Copies the values row-major into `buf`, which holds `len` floats.
//
// # Safety
// `buf` must be writable for `len` floats.
enum MfStatus mf_mel_copy(const struct MfMel *mel, float *buf, size_t len);

// # Safety
// `mel` must come from this library and not be used afterwards.
void mf_mel_free(struct MfMel *mel);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MELFLOW_H */
