#ifndef SENTVAE_H
#define SENTVAE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SvStatus {
  SV_STATUS_OK = 0,
  SV_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Malformed input data.
   */
  SV_STATUS_DATA = 2,
  /**
   * A non-finite value was produced.
   */
  SV_STATUS_NUMERICAL = 3,
  SV_STATUS_NULL_POINTER = 4,
  SV_STATUS_INVALID_UTF8 = 5,
  /**
   * Corrupt, truncated or incompatible checkpoint.
   */
  SV_STATUS_CHECKPOINT = 6,
  SV_STATUS_MISSING_COMPONENT = 7,
  SV_STATUS_IO = 8,
  /**
   * A compression word does not occur in the source.
   */
  SV_STATUS_UNSUPPORTED_SEQUENCE = 9,
  /**
   * An internal panic was caught at the boundary.
   */
  SV_STATUS_PANIC = 10,
} SvStatus;

typedef enum SvDecodeMode {
  /**
   * Pointer only: output words are copied from the source.
   */
  SV_DECODE_MODE_EXTRACTIVE = 0,
  /**
   * Copy or generate from the compression vocabulary.
   */
  SV_DECODE_MODE_ABSTRACTIVE = 1,
} SvDecodeMode;

/**
 * A loaded model checkpoint.
 */
typedef struct SvModel SvModel;

typedef struct SvRougeScore {
  double recall;
  double precision;
  double f1;
} SvRougeScore;

typedef struct SvRouge {
  struct SvRougeScore rouge_1;
  struct SvRougeScore rouge_2;
  struct SvRougeScore rouge_l;
} SvRouge;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sv_version(void);

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *sv_last_error(void);

/**
 * Loads a model checkpoint written by `sentvae train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SvStatus sv_model_load(const char *path, struct SvModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`sv_model_load`] not yet freed.
 */
void sv_model_free(struct SvModel *model);

/**
 * Optimiser steps the checkpointed model was trained for.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum SvStatus sv_model_steps(const struct SvModel *model, uint64_t *out);

/**
 * Beam-decodes one sentence. `mode` is an [`SvDecodeMode`] value and
 * `beam_size` 0 selects the checkpoint's configured width. On success
 * `*out` receives the space-separated compression.
 *
 * # Safety
 * `model` must be a live handle, `sentence` a NUL-terminated string and
 * `out` writable.
 */
enum SvStatus sv_compress(const struct SvModel *model,
                          const char *sentence,
                          uint32_t mode,
                          size_t beam_size,
                          char **out);

/**
 * Log-probability of `compression` given `source` under the
 * forced-attention model, end symbol included.
 *
 * # Safety
 * `model` must be a live handle, both strings NUL-terminated and `out`
 * writable.
 */
enum SvStatus sv_compression_log_prob(const struct SvModel *model,
                                      const char *source,
                                      const char *compression,
                                      double *out);

/**
 * ROUGE-1, ROUGE-2 and ROUGE-L of one candidate against one reference.
 *
 * # Safety
 * Both strings must be NUL-terminated and `out` writable.
 */
enum SvStatus sv_rouge(const char *candidate, const char *reference, struct SvRouge *out);

/**
 * Releases a string returned by this library; null is ignored.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void sv_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SENTVAE_H */
