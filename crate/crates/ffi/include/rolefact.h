#ifndef ROLEFACT_H
#define ROLEFACT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum RfStatus {
  RF_STATUS_OK = 0,
  RF_STATUS_NULL_ARGUMENT = 1,
  RF_STATUS_INVALID_UTF8 = 2,
  RF_STATUS_INVALID_ARGUMENT = 3,
  RF_STATUS_NOT_FOUND = 4,
  RF_STATUS_CORPUS = 5,
  RF_STATUS_BACKEND = 6,
  RF_STATUS_PIPELINE = 7,
  RF_STATUS_PANIC = 99,
} RfStatus;

// A chat backend plus the pipeline settings used by [`rf_respond`].
typedef struct RfEngine RfEngine;

// A loaded corpus and its BM25 index.
typedef struct RfKnowledgeBase RfKnowledgeBase;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null after a
// success. Valid until the next call into the library on this thread.
const char *rf_last_error(void);

// Library version as a static string.
const char *rf_version(void);

// # Safety
// `s` must be null or a string returned by this library, not yet freed.
void rf_string_free(char *s);

// Loads a JSONL corpus (file or directory) and builds its index.
//
// # Safety
// `path` must be a valid C string; `out` must be writable.
enum RfStatus rf_kb_load(const char *path, struct RfKnowledgeBase **out);

// # Safety
// `kb` must be null or a handle from [`rf_kb_load`], not yet freed.
void rf_kb_free(struct RfKnowledgeBase *kb);

// Engine over a scripted fixture file. `cache_dir` may be null.
//
// # Safety
// `fixtures` must be a valid C string, `cache_dir` null or a valid C
// string, and `out` writable.
enum RfStatus rf_engine_new_mock(const char *fixtures,
                                 const char *cache_dir,
                                 struct RfEngine **out);

// Engine over the OpenAI-compatible endpoint named by `ROLEFACT_API_BASE`,
// `ROLEFACT_MODEL` and `ROLEFACT_API_KEY`. `cache_dir` may be null.
//
// # Safety
// `cache_dir` must be null or a valid C string; `out` must be writable.
enum RfStatus rf_engine_new_from_env(const char *cache_dir, struct RfEngine **out);

// # Safety
// `engine` must be null or a handle from an `rf_engine_new_*` call, not yet freed.
void rf_engine_free(struct RfEngine *engine);

// Sets the self-check acceptance threshold to `num/den`.
//
// # Safety
// `engine` must be a live handle not used concurrently.
enum RfStatus rf_engine_set_threshold(struct RfEngine *engine, uint64_t num, uint64_t den);

// Sets the number of self-check samples; 0 disables self-checking.
//
// # Safety
// `engine` must be a live handle not used concurrently.
enum RfStatus rf_engine_set_samples(struct RfEngine *engine, uint32_t m);

// Sets how many scenes are retrieved per query.
//
// # Safety
// `engine` must be a live handle not used concurrently.
enum RfStatus rf_engine_set_retrieval_depth(struct RfEngine *engine, uintptr_t n);

// Answers one interview task. `task_json` is a task object; `method` is one
// of `baseline`, `kgr`, `sr`, `rolefact`, or null for `rolefact`. On
// success `*out_trace` receives the response trace as JSON.
//
// # Safety
// Handles must be live; strings valid C strings; `out_trace` writable.
enum RfStatus rf_respond(const struct RfEngine *engine,
                         const struct RfKnowledgeBase *kb,
                         const char *task_json,
                         const char *method,
                         char **out_trace);

// Top-`n` scenes of `story_id` for `query` as a JSON array of
// `{document, score}`. A negative `cutoff` means no cutoff.
//
// # Safety
// `kb` must be live; strings valid C strings; `out_json` writable.
enum RfStatus rf_retrieve(const struct RfKnowledgeBase *kb,
                          const char *story_id,
                          const char *query,
                          uintptr_t n,
                          int64_t cutoff,
                          char **out_json);

// Whether `k` supporting verdicts out of `m` samples pass the threshold
// `num/den`. Never passes when `m` is 0.
//
// # Safety
// `out_pass` must be writable.
enum RfStatus rf_confidence_gate(uint32_t k,
                                 uint32_t m,
                                 uint64_t num,
                                 uint64_t den,
                                 bool *out_pass);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ROLEFACT_H */
