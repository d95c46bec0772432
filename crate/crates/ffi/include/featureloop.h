#ifndef FEATURELOOP_H
#define FEATURELOOP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum FlStatus {
  FL_STATUS_OK = 0,
  FL_STATUS_NULL_POINTER = 1,
  FL_STATUS_INVALID_UTF8 = 2,
  FL_STATUS_INVALID_ARGUMENT = 3,
  FL_STATUS_MISSING_PLACEHOLDER = 4,
  FL_STATUS_DUPLICATE_PLACEHOLDER = 5,
  FL_STATUS_STORAGE_UNAVAILABLE = 6,
  FL_STATUS_CORRUPT_TAIL = 7,
  FL_STATUS_INVALID_RECORD = 8,
  FL_STATUS_DEGENERATE_LABELS = 9,
  FL_STATUS_PANIC = 10,
} FlStatus;

/**
 * Opaque handle to an open memory store.
 */
typedef struct FlMemory FlMemory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL after a
 * success. Valid until the next call on this thread; do not free.
 */
const char *fl_last_error_message(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void fl_string_free(char *s);

/**
 * Hex content hash of the whitespace-normalized text.
 *
 * # Safety
 * `input` must be a NUL-terminated string; `out` must be writable.
 */
enum FlStatus fl_content_hash(const char *input, char **out);

/**
 * Checks the placeholder rule and writes the template id.
 *
 * # Safety
 * `prompt` must be a NUL-terminated string; `out_id` must be writable.
 */
enum FlStatus fl_validate_template(const char *prompt, char **out_id);

/**
 * Parses raw model output into a JSON array of tags.
 *
 * # Safety
 * `raw` must be a NUL-terminated string; `out_json` must be writable.
 */
enum FlStatus fl_parse_tags(const char *raw, char **out_json);

/**
 * Mean binary cross-entropy.
 *
 * # Safety
 * `preds` and `labels` must point to `n` elements; `out` must be writable.
 */
enum FlStatus fl_cross_entropy(const double *preds, const uint8_t *labels, size_t n, double *out);

/**
 * Relative information gain against the constant mean-label predictor.
 *
 * # Safety
 * `preds` and `labels` must point to `n` elements; `out` must be writable.
 */
enum FlStatus fl_rig(const double *preds, const uint8_t *labels, size_t n, double *out);

/**
 * Opens (creating if absent) the memory log at `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable. The
 * handle must be released with [`fl_memory_close`].
 */
enum FlStatus fl_memory_open(const char *path, struct FlMemory **out);

/**
 * Closes a handle. NULL is ignored.
 *
 * # Safety
 * `handle` must come from [`fl_memory_open`] and not be used afterwards.
 */
void fl_memory_close(struct FlMemory *handle);

/**
 * Appends a record given as JSON: `prompt_text`, `agent_id`, `status`
 * (default "ok") and, for ok records, `baseline_rig`, `extended_rig`,
 * `eval_size`, `repeats`. The relative score is derived. Writes the
 * assigned seq.
 *
 * # Safety
 * `handle` must be open; `draft_json` NUL-terminated; `out_seq` writable.
 */
enum FlStatus fl_memory_append_json(const struct FlMemory *handle,
                                    const char *draft_json,
                                    uint64_t *out_seq);

/**
 * Number of valid records.
 *
 * # Safety
 * `handle` must be open; `out` writable.
 */
enum FlStatus fl_memory_len(const struct FlMemory *handle, uint64_t *out);

/**
 * Whether any record carries `prompt_id`.
 *
 * # Safety
 * `handle` must be open; `prompt_id` NUL-terminated; `out` writable.
 */
enum FlStatus fl_memory_contains(const struct FlMemory *handle, const char *prompt_id, bool *out);

/**
 * Best `k` ok records as a JSON array.
 *
 * # Safety
 * `handle` must be open; `out_json` writable.
 */
enum FlStatus fl_memory_top_k_json(const struct FlMemory *handle, size_t k, char **out_json);

/**
 * Worst `k` ok records as a JSON array.
 *
 * # Safety
 * `handle` must be open; `out_json` writable.
 */
enum FlStatus fl_memory_bottom_k_json(const struct FlMemory *handle, size_t k, char **out_json);

/**
 * Records with seq greater than `since` as a JSON array; a negative
 * `since` returns every record.
 *
 * # Safety
 * `handle` must be open; `out_json` writable.
 */
enum FlStatus fl_memory_read_since_json(const struct FlMemory *handle,
                                        int64_t since,
                                        char **out_json);

/**
 * Truncates a torn tail; writes the number of bytes dropped.
 *
 * # Safety
 * `handle` must be open; `out_truncated` writable.
 */
enum FlStatus fl_memory_recover(const struct FlMemory *handle, uint64_t *out_truncated);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEATURELOOP_H */
