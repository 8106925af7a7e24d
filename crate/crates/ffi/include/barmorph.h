#ifndef BARMORPH_H
#define BARMORPH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum BmStatus {
  BM_STATUS_OK = 0,
  BM_STATUS_NULL_ARGUMENT = 1,
  BM_STATUS_INVALID_UTF8 = 2,
  BM_STATUS_IO = 3,
  BM_STATUS_MALFORMED_MIDI = 4,
  BM_STATUS_UNSUPPORTED_METER = 5,
  BM_STATUS_CHECKPOINT = 6,
  BM_STATUS_BAD_OVERRIDES = 7,
  BM_STATUS_DECODE = 8,
  BM_STATUS_BUFFER_TOO_SMALL = 9,
  BM_STATUS_INVALID_ARGUMENT = 10,
  BM_STATUS_PANIC = 11,
} BmStatus;

/**
 * An owned byte buffer.
 */
typedef struct BmBuffer BmBuffer;

/**
 * A loaded style-transfer checkpoint.
 */
typedef struct BmModel BmModel;

/**
 * A quantized score.
 */
typedef struct BmScore BmScore;

/**
 * Sampling parameters for [`bm_transfer`].
 */
typedef struct BmSampling {
  /**
   * Nucleus mass in (0, 1].
   */
  double p;
  /**
   * Softmax temperature, > 0.
   */
  double tau;
  uint64_t seed;
  uintptr_t max_tokens_per_bar;
  /**
   * Window in bars; 0 picks the checkpoint's training crop.
   */
  uintptr_t window;
} BmSampling;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *bm_version(void);

/**
 * Copies the calling thread's last error message into `buf` (always
 * NUL-terminated when `cap > 0`) and returns the full message length.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes or be null with `cap == 0`.
 */
uintptr_t bm_last_error(char *buf, uintptr_t cap);

/**
 * Parses and quantizes a Standard MIDI File.
 *
 * # Safety
 * `data` must point to `len` readable bytes; `out` must be writable.
 */
enum BmStatus bm_score_from_midi(const uint8_t *data,
                                 uintptr_t len,
                                 uint16_t sub_beats_per_bar,
                                 struct BmScore **out);

/**
 * Builds a score from REMI token ids.
 *
 * # Safety
 * `tokens` must point to `len` readable ids; `out` must be writable.
 */
enum BmStatus bm_score_from_tokens(const uint32_t *tokens,
                                   uintptr_t len,
                                   uint16_t sub_beats_per_bar,
                                   struct BmScore **out);

/**
 * # Safety
 * `score` must be null or a handle from this library, freed once.
 */
void bm_score_free(struct BmScore *score);

/**
 * Number of bars, or 0 for a null handle.
 *
 * # Safety
 * `score` must be null or a live handle.
 */
uintptr_t bm_score_n_bars(const struct BmScore *score);

/**
 * Writes REMI token ids into `out` (capacity `cap`) and their count into
 * `out_len`. Returns `BufferTooSmall` with `out_len` set when `cap` is
 * insufficient; call with `out = NULL, cap = 0` to query the size.
 *
 * # Safety
 * `score` must be live; `out` must hold `cap` ids; `out_len` writable.
 */
enum BmStatus bm_score_tokens(const struct BmScore *score,
                              uint32_t *out,
                              uintptr_t cap,
                              uintptr_t *out_len);

/**
 * Per-bar attribute classes. Cut-offs come from `model` when given,
 * otherwise the reference cut-offs are used. Both arrays need
 * `bm_score_n_bars(score)` entries.
 *
 * # Safety
 * `score` must be live; `model` null or live; arrays hold `cap` bytes.
 */
enum BmStatus bm_score_attributes(const struct BmScore *score,
                                  const struct BmModel *model,
                                  uint8_t *rhym,
                                  uint8_t *poly,
                                  uintptr_t cap);

/**
 * Serializes a score as a Standard MIDI File.
 *
 * # Safety
 * `score` must be live; `out` writable.
 */
enum BmStatus bm_score_to_midi(const struct BmScore *score, struct BmBuffer **out);

/**
 * # Safety
 * `buf` must be live.
 */
const uint8_t *bm_buffer_data(const struct BmBuffer *buf);

/**
 * # Safety
 * `buf` must be null or live.
 */
uintptr_t bm_buffer_len(const struct BmBuffer *buf);

/**
 * # Safety
 * `buf` must be null or a handle from this library, freed once.
 */
void bm_buffer_free(struct BmBuffer *buf);

/**
 * Loads a style-model checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` writable.
 */
enum BmStatus bm_model_load(const char *path, struct BmModel **out);

/**
 * # Safety
 * `model` must be null or a handle from this library, freed once.
 */
void bm_model_free(struct BmModel *model);

/**
 * Default sampling parameters.
 */
struct BmSampling bm_sampling_default(void);

/**
 * Restyles `source` with rhythm and polyphony overrides written as
 * `"+n"`, `"-n"`, `"=n"` or a comma list with one entry per bar. A null
 * override keeps the source classes.
 *
 * # Safety
 * Handles must be live; strings null or NUL-terminated; `out` writable.
 */
enum BmStatus bm_transfer(const struct BmModel *model,
                          const struct BmScore *source,
                          const char *rhym,
                          const char *poly,
                          const struct BmSampling *sampling,
                          struct BmScore **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BARMORPH_H */
