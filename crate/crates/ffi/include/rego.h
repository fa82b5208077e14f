#ifndef REGO_FFI_H
#define REGO_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum RegoStatus {
  REGO_STATUS_OK = 0,
  REGO_STATUS_NULL_POINTER = 1,
  REGO_STATUS_INVALID_UTF8 = 2,
  REGO_STATUS_IO = 3,
  REGO_STATUS_SHAPE = 4,
  REGO_STATUS_CONFIG = 5,
  REGO_STATUS_NOT_FOUND = 6,
  REGO_STATUS_INVALID_VALUE = 7,
  REGO_STATUS_CHECKPOINT = 8,
  REGO_STATUS_BUFFER_TOO_SMALL = 9,
  REGO_STATUS_PANIC = 10,
  REGO_STATUS_OTHER = 11,
} RegoStatus;

// A loaded reference index. Opaque to C.
typedef struct RegoIndex RegoIndex;

// A loaded checkpoint. Opaque to C.
typedef struct RegoModel RegoModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *rego_version(void);

// Message of the last failure on this thread, or null if none occurred.
// The pointer stays valid until the next failing call on the same thread.
const char *rego_last_error_message(void);

// Loads a checkpoint file into a new model handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum RegoStatus rego_model_load(const char *path, struct RegoModel **out);

// Releases a model handle. Null is ignored.
//
// # Safety
// `model` must come from [`rego_model_load`] and not be used afterwards.
void rego_model_free(struct RegoModel *model);

// Full-image height and width the model was trained for.
//
// # Safety
// `model` must be a live handle; `height` and `width` writable pointers.
enum RegoStatus rego_model_resolution(const struct RegoModel *model,
                                      uint32_t *height,
                                      uint32_t *width);

// Outpaints an `H × W/2` RGB left half into an `H × W` RGB composite whose
// left half is the input. `sketch` (`H·W/2` bytes) and `reference`
// (`H·W/2·3` bytes, a right half) may be null: a null sketch selects random
// outpainting and a null reference means no guidance.
//
// # Safety
// Non-null buffers must be valid for their stated lengths.
enum RegoStatus rego_model_outpaint(const struct RegoModel *model,
                                    const uint8_t *left_rgb,
                                    size_t left_len,
                                    const uint8_t *sketch,
                                    size_t sketch_len,
                                    const uint8_t *reference_rgb,
                                    size_t reference_len,
                                    uint8_t *out_rgb,
                                    size_t out_len);

// Loads `index.json` (and any `images/` beside it) into a new index handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum RegoStatus rego_index_load(const char *path, struct RegoIndex **out);

// Releases an index handle. Null is ignored.
//
// # Safety
// `index` must come from [`rego_index_load`] and not be used afterwards.
void rego_index_free(struct RegoIndex *index);

// Number of indexed images.
//
// # Safety
// `index` must be a live handle and `len` writable.
enum RegoStatus rego_index_len(const struct RegoIndex *index, size_t *len);

// The `k` nearest other images of the indexed image `id`, most similar
// first, as positions (see [`rego_index_id`]) and cosine similarities.
//
// # Safety
// `id` must be NUL-terminated; both output arrays must hold `k` elements.
enum RegoStatus rego_index_neighbors(const struct RegoIndex *index,
                                     const char *id,
                                     size_t k,
                                     size_t *out_positions,
                                     double *out_similarities);

// Copies the id at `position` into `buf` as a NUL-terminated string.
//
// # Safety
// `buf` must be writable for `buf_len` bytes.
enum RegoStatus rego_index_id(const struct RegoIndex *index,
                              size_t position,
                              char *buf,
                              size_t buf_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REGO_FFI_H */
