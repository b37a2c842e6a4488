#ifndef UNIFUSE_H
#define UNIFUSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UnifuseModality {
  UNIFUSE_MODALITY_SIGN = 0,
  UNIFUSE_MODALITY_LIP = 1,
  UNIFUSE_MODALITY_AUDIO = 2,
} UnifuseModality;

typedef enum UnifuseStatus {
  UNIFUSE_STATUS_OK = 0,
  UNIFUSE_STATUS_CONFIG = 1,
  UNIFUSE_STATUS_IO = 2,
  UNIFUSE_STATUS_NUMERIC = 3,
  UNIFUSE_STATUS_INVALID_ARGUMENT = 4,
  UNIFUSE_STATUS_NULL_POINTER = 5,
  UNIFUSE_STATUS_BUFFER_TOO_SMALL = 6,
  UNIFUSE_STATUS_PANIC = 7,
} UnifuseStatus;

typedef enum UnifuseTask {
  UNIFUSE_TASK_SLT = 0,
  UNIFUSE_TASK_VSR = 1,
  UNIFUSE_TASK_ASR = 2,
  UNIFUSE_TASK_AVSR = 3,
} UnifuseTask;

/**
 * A loaded corpus directory.
 */
typedef struct UnifuseCorpus UnifuseCorpus;

/**
 * A loaded checkpoint.
 */
typedef struct UnifuseModel UnifuseModel;

/**
 * `greedy` ignores `beam_width` and `temperature`.
 */
typedef struct UnifuseDecodeOptions {
  bool greedy;
  size_t beam_width;
  double temperature;
  size_t max_len;
} UnifuseDecodeOptions;

/**
 * One modality stream: `num_frames` rows of `unifuse_modality_dims` values,
 * row-major. A null `frames` pointer means the stream is absent.
 */
typedef struct UnifuseStream {
  const double *frames;
  size_t num_frames;
} UnifuseStream;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *unifuse_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `cap > 0`) and returns the full length plus one.
 */
size_t unifuse_last_error(char *buf, size_t cap);

/**
 * Channels per frame of a modality stream.
 */
size_t unifuse_modality_dims(enum UnifuseModality m);

size_t unifuse_vocab_size(void);

/**
 * Writes a token's display name (e.g. `w3`, `<eos>`); returns the full length plus one.
 */
size_t unifuse_token_name(uint32_t token, char *buf, size_t cap);

/**
 * Greedy for SLT, width-5 beam at temperature 0.3 otherwise, up to 12 tokens.
 */
struct UnifuseDecodeOptions unifuse_decode_options_default(enum UnifuseTask task);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum UnifuseStatus unifuse_model_load(const char *path, struct UnifuseModel **out);

/**
 * # Safety
 * `model` must come from `unifuse_model_load` (or be null) and not be used afterwards.
 */
void unifuse_model_free(struct UnifuseModel *model);

/**
 * Decodes raw streams for `task`. Streams the task masks may be absent.
 * `opts` may be null for the task's default rule. On `BufferTooSmall`,
 * `*len` still holds the required token count.
 *
 * # Safety
 * Pointers must be null or valid for the sizes they describe.
 */
enum UnifuseStatus unifuse_decode(const struct UnifuseModel *model,
                                  enum UnifuseTask task,
                                  const struct UnifuseStream *sign,
                                  const struct UnifuseStream *lip,
                                  const struct UnifuseStream *audio,
                                  const struct UnifuseDecodeOptions *opts,
                                  uint32_t *tokens,
                                  size_t cap,
                                  size_t *len,
                                  double *score);

/**
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a writable pointer.
 */
enum UnifuseStatus unifuse_corpus_open(const char *dir, struct UnifuseCorpus **out);

/**
 * # Safety
 * `corpus` must come from `unifuse_corpus_open` (or be null) and not be used afterwards.
 */
void unifuse_corpus_free(struct UnifuseCorpus *corpus);

/**
 * Writes the reference transcript of sample `id`.
 *
 * # Safety
 * `tokens` must have room for `cap` entries; `len` must be writable.
 */
enum UnifuseStatus unifuse_corpus_reference(const struct UnifuseCorpus *corpus,
                                            uint32_t id,
                                            uint32_t *tokens,
                                            size_t cap,
                                            size_t *len);

/**
 * Decodes corpus sample `id` for `task`.
 *
 * # Safety
 * As for `unifuse_decode`.
 */
enum UnifuseStatus unifuse_decode_sample(const struct UnifuseModel *model,
                                         const struct UnifuseCorpus *corpus,
                                         uint32_t id,
                                         enum UnifuseTask task,
                                         const struct UnifuseDecodeOptions *opts,
                                         uint32_t *tokens,
                                         size_t cap,
                                         size_t *len,
                                         double *score);

/**
 * Word error rate of one hypothesis against one reference.
 *
 * # Safety
 * `reference`/`hypothesis` must hold the stated number of entries; `out` must be writable.
 */
enum UnifuseStatus unifuse_wer(const uint32_t *reference,
                               size_t reference_len,
                               const uint32_t *hypothesis,
                               size_t hypothesis_len,
                               double *out);

/**
 * BLEU-4 of a single sentence pair (corpus BLEU over one sentence).
 *
 * # Safety
 * As for `unifuse_wer`.
 */
enum UnifuseStatus unifuse_bleu4(const uint32_t *reference,
                                 size_t reference_len,
                                 const uint32_t *hypothesis,
                                 size_t hypothesis_len,
                                 double *out);

/**
 * ROUGE-L F1 of a single sentence pair.
 *
 * # Safety
 * As for `unifuse_wer`.
 */
enum UnifuseStatus unifuse_rouge_l(const uint32_t *reference,
                                   size_t reference_len,
                                   const uint32_t *hypothesis,
                                   size_t hypothesis_len,
                                   double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNIFUSE_H */
