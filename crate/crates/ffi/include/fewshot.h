#ifndef FEWSHOT_H
#define FEWSHOT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FsParseRule {
  FS_PARSE_RULE_INDEX_MATCH = 0,
  FS_PARSE_RULE_UNKNOWN_MARKER = 1,
  FS_PARSE_RULE_EXACT_NAME = 2,
  FS_PARSE_RULE_UNIQUE_SUBSTRING = 3,
  FS_PARSE_RULE_FALLBACK = 4,
} FsParseRule;

typedef enum FsStatus {
  FS_STATUS_OK = 0,
  FS_STATUS_NULL_POINTER = 1,
  FS_STATUS_INVALID_UTF8 = 2,
  FS_STATUS_INVALID_ARGUMENT = 3,
  FS_STATUS_PANIC = 4,
} FsStatus;

// Opaque exact nearest-neighbour index.
typedef struct FsIndex FsIndex;

// Opaque label set.
typedef struct FsLabelSet FsLabelSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on this thread.
const char *fs_last_error_message(void);

// # Safety
// `s` must come from this library or be null.
void fs_string_free(char *s);

// # Safety
// `text` must be a NUL-terminated string; `out` must be writable.
enum FsStatus fs_canonicalize(const char *text, char **out);

// Builds a label set from `count` names.
//
// # Safety
// `names` must point to `count` NUL-terminated strings; `out` must be
// writable.
enum FsStatus fs_label_set_new(const char *const *names, size_t count, struct FsLabelSet **out);

// # Safety
// `out` must be writable.
enum FsStatus fs_label_set_banking77(struct FsLabelSet **out);

// Number of labels, or 0 for a null handle.
//
// # Safety
// `labels` must be a live handle or null.
size_t fs_label_set_len(const struct FsLabelSet *labels);

// # Safety
// `labels` must come from `fs_label_set_new`/`fs_label_set_banking77`
// and not be used afterwards.
void fs_label_set_free(struct FsLabelSet *labels);

// Parses a model answer. `out_label` receives the label index or -1 for
// Unknown.
//
// # Safety
// Pointers must be valid; `raw` NUL-terminated.
enum FsStatus fs_parse_prediction(const struct FsLabelSet *labels,
                                  const char *raw,
                                  int64_t *out_label,
                                  enum FsParseRule *out_rule);

// Writes the deterministic offline embedding of `text` into `out[0..dim)`.
//
// # Safety
// `out` must have room for `dim` floats.
enum FsStatus fs_test_embed(const char *text, size_t dim, float *out);

// Builds an index over `n` row-major unit vectors of length `dim`.
//
// # Safety
// `vectors` must hold `n * dim` floats; `out` must be writable.
enum FsStatus fs_index_new(const float *vectors, size_t n, size_t dim, struct FsIndex **out);

// # Safety
// `index` must be a live handle or null.
size_t fs_index_len(const struct FsIndex *index);

// Exact top-`k` by cosine similarity. Ties go to the lower id.
// `k` must lie in `1..=fs_index_len(index)`.
//
// # Safety
// `query` must hold `dim` floats; `out_ids` and `out_similarities` room
// for `k` values each.
enum FsStatus fs_index_top_k(const struct FsIndex *index,
                             const float *query,
                             size_t dim,
                             size_t k,
                             size_t *out_ids,
                             double *out_similarities);

// # Safety
// `index` must come from `fs_index_new` and not be used afterwards.
void fs_index_free(struct FsIndex *index);

// Micro- and macro-F1 over `n` items. A predicted value of -1 (or any
// value outside `[0, classes)`) counts as Unknown.
//
// # Safety
// `predicted` and `gold` must hold `n` values.
enum FsStatus fs_f1_scores(const int64_t *predicted,
                           const size_t *gold,
                           size_t n,
                           size_t classes,
                           double *out_micro,
                           double *out_macro);

// Exact USD cost of one call; prices are decimal strings per 1,000 tokens
// and the result is a decimal string.
//
// # Safety
// String arguments must be NUL-terminated; `out` must be writable.
enum FsStatus fs_price_call(uint64_t prompt_tokens,
                            uint64_t completion_tokens,
                            const char *input_per_1k,
                            const char *output_per_1k,
                            char **out);

// `k` as a percentage of `pool` at one decimal, e.g. "2.2%".
//
// # Safety
// `out` must be writable.
enum FsStatus fs_format_pool_fraction(size_t k, size_t pool, char **out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* FEWSHOT_H */
