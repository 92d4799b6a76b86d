/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef COURSEKB_H
#define COURSEKB_H

#include <stddef.h>
#include <stdint.h>

typedef enum CkRougeMetric {
  CK_ROUGE_METRIC_ROUGE1 = 0,
  CK_ROUGE_METRIC_ROUGE2 = 1,
  CK_ROUGE_METRIC_ROUGE_L = 2,
} CkRougeMetric;

/*
 Result of every fallible call.
 */
typedef enum CkStatus {
  CK_STATUS_OK = 0,
  /*
   A required pointer argument was NULL.
   */
  CK_STATUS_NULL_ARGUMENT = 1,
  /*
   A string argument was not valid UTF-8.
   */
  CK_STATUS_INVALID_UTF8 = 2,
  /*
   Bad argument value; see the last error for details.
   */
  CK_STATUS_INVALID_ARGUMENT = 3,
  /*
   No index exists for the course.
   */
  CK_STATUS_NOT_FOUND = 4,
  /*
   The stored index failed validation.
   */
  CK_STATUS_CORRUPT_INDEX = 5,
  /*
   Object store could not be read.
   */
  CK_STATUS_STORE_UNAVAILABLE = 6,
  /*
   Any other failure, including a caught panic.
   */
  CK_STATUS_INTERNAL = 7,
} CkStatus;

/*
 A loaded course index. Opaque to C.
 */
typedef struct CkIndex CkIndex;

typedef struct CkRougeScore {
  double precision;
  double recall;
  double f1;
} CkRougeScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Load the index of `course` (title or slug) from a filesystem object
 store rooted at `store_root`.

 # Safety
 String arguments must be valid NUL-terminated strings; `out` must be
 valid for a pointer write.
 */
enum CkStatus ck_index_open(const char *store_root, const char *course, struct CkIndex **out);

/*
 # Safety
 `index` must be NULL or a handle from [`ck_index_open`] not yet freed.
 */
void ck_index_free(struct CkIndex *index);

/*
 Number of chunks, or 0 for a NULL handle.

 # Safety
 `index` must be NULL or a live handle.
 */
uintptr_t ck_index_n_chunks(const struct CkIndex *index);

/*
 Manifest version, or 0 for a NULL handle.

 # Safety
 `index` must be NULL or a live handle.
 */
uint64_t ck_index_manifest_version(const struct CkIndex *index);

/*
 Hybrid retrieval. Writes a JSON array of
 `{chunk_id, bm25_score, cosine_score, fused_score, rank, doc_id, text}`
 to `out_json`. `k` of 0 and negative `alpha` select the defaults.

 # Safety
 `index` must be a live handle, `question` a valid string and
 `out_json` valid for a pointer write.
 */
enum CkStatus ck_index_query_json(const struct CkIndex *index,
                                  const char *question,
                                  uint32_t k,
                                  double alpha,
                                  char **out_json);

/*
 ROUGE score of `candidate` against `reference`.

 # Safety
 String arguments must be valid strings; `out` valid for a write.
 */
enum CkStatus ck_rouge(const char *candidate,
                       const char *reference,
                       enum CkRougeMetric metric,
                       struct CkRougeScore *out);

/*
 Clean caption entries given as the provider JSON array
 `[{"text", "start", "duration"}]` and prefix the video title.

 # Safety
 String arguments must be valid strings; `out` valid for a write.
 */
enum CkStatus ck_clean_transcript(const char *entries_json, const char *title, char **out);

/*
 Render the prompt of `mode` (`restricted`, `relaxed` or `medical`) with
 context chunks given as a JSON array of strings in rank order.

 # Safety
 String arguments must be valid strings; `out` valid for a write.
 */
enum CkStatus ck_render_prompt(const char *mode,
                               const char *context_json,
                               const char *question,
                               char **out);

/*
 Release a string returned by this library.

 # Safety
 `s` must be NULL or a string from this library not yet freed.
 */
void ck_string_free(char *s);

/*
 Machine code of the last failure on this thread (e.g. `index_not_found`),
 or NULL. Valid until the next call into this library on the same thread.
 */
const char *ck_last_error_code(void);

/*
 Human-readable message of the last failure on this thread, or NULL.
 Valid until the next call into this library on the same thread.
 */
const char *ck_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COURSEKB_H */
