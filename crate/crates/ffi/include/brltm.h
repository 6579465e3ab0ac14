#ifndef BRLTM_H
#define BRLTM_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum BrltmStatus {
  BRLTM_STATUS_OK = 0,
  BRLTM_STATUS_NULL_POINTER = 1,
  BRLTM_STATUS_INVALID_ARGUMENT = 2,
  BRLTM_STATUS_IO = 3,
  BRLTM_STATUS_FORMAT = 4,
  BRLTM_STATUS_INCOMPATIBLE = 5,
  BRLTM_STATUS_NUMERIC = 6,
  BRLTM_STATUS_PANIC = 7,
} BrltmStatus;

// Loaded model.
typedef struct BrltmModel BrltmModel;

// Loaded vocabulary.
typedef struct BrltmVocab BrltmVocab;

// One patient sequence. `segments` holds 0 for A and 1 for B; `gender` is
// 0 for F and 1 for M. Positions are `0..len`.
typedef struct BrltmSequence {
  const uint32_t *tokens;
  const uint8_t *segments;
  const int32_t *ages;
  uintptr_t len;
  uint8_t gender;
} BrltmSequence;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. Owned by the
// library; valid until the next failing call.
const char *brltm_last_error(void);

// Library version as a static string.
const char *brltm_version(void);

// Loads a vocabulary file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum BrltmStatus brltm_vocab_load(const char *path, struct BrltmVocab **out);

// # Safety
// `vocab` must come from `brltm_vocab_load` and not be used afterwards.
void brltm_vocab_free(struct BrltmVocab *vocab);

// Number of tokens, specials included; 0 for a null handle.
//
// # Safety
// `vocab` must be null or a live handle.
uintptr_t brltm_vocab_len(const struct BrltmVocab *vocab);

// Id of `token`; unknown tokens map to the UNK id.
//
// # Safety
// `vocab` must be a live handle, `token` NUL-terminated and `out` valid.
enum BrltmStatus brltm_vocab_id(const struct BrltmVocab *vocab, const char *token, uint32_t *out);

// Loads a checkpoint; with a non-null `vocab` its content hash must match.
//
// # Safety
// `path` must be NUL-terminated, `vocab` null or live, `out` valid.
enum BrltmStatus brltm_model_load(const char *path,
                                  const struct BrltmVocab *vocab,
                                  struct BrltmModel **out);

// # Safety
// `model` must come from `brltm_model_load` and not be used afterwards.
void brltm_model_free(struct BrltmModel *model);

// Vocabulary size the model was built for; 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t brltm_model_vocab_size(const struct BrltmModel *model);

// Longest accepted sequence; 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t brltm_model_max_len(const struct BrltmModel *model);

// Positive-class probability from a fine-tuned model.
//
// # Safety
// `model` must be live, `seq` valid with arrays of `len` elements, `out`
// valid.
enum BrltmStatus brltm_model_predict(const struct BrltmModel *model,
                                     const struct BrltmSequence *seq,
                                     double *out);

// Masked-code logits, `len × vocab_size` row-major, into `out` of
// `out_len` elements.
//
// # Safety
// As for `brltm_model_predict`; `out` must hold `out_len` doubles.
enum BrltmStatus brltm_model_mlm_logits(const struct BrltmModel *model,
                                        const struct BrltmSequence *seq,
                                        double *out,
                                        uintptr_t out_len);

// Head-aggregated attention row of position `query` at `layer`
// (`-1` for the last) into `out` of `out_len >= len` elements.
// `max_heads` selects max over heads instead of the mean.
//
// # Safety
// As for `brltm_model_mlm_logits`.
enum BrltmStatus brltm_model_attention_row(const struct BrltmModel *model,
                                           const struct BrltmSequence *seq,
                                           int32_t layer,
                                           uintptr_t query,
                                           bool max_heads,
                                           double *out,
                                           uintptr_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BRLTM_H */
