/* C ABI for the discrete flow matching engine. Generated by cbindgen; do not edit. */

#ifndef DFM_FFI_H
#define DFM_FFI_H

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible call.
typedef enum DfmStatus {
  DFM_STATUS_OK = 0,
  DFM_STATUS_NULL_POINTER = 1,
  DFM_STATUS_INVALID_UTF8 = 2,
  DFM_STATUS_CONFIG_ERROR = 3,
  DFM_STATUS_RUNTIME_ERROR = 4,
  DFM_STATUS_BUFFER_TOO_SMALL = 5,
} DfmStatus;

// Opaque engine handle: a loaded experiment configuration.
typedef struct DfmEngine DfmEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copy the last error message for this thread into `buf` (NUL-terminated,
// truncated to `cap`). Returns the full message length in bytes, excluding
// the terminator. Safe to call with `buf == NULL` or `cap == 0` to query
// the required size.
//
// # Safety
// `buf`, when non-NULL, must point to at least `cap` writable bytes.
uintptr_t dfm_last_error(char *buf, uintptr_t cap);

// Library version as a static NUL-terminated string.
const char *dfm_version(void);

// Create an engine from a TOML config file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be a valid pointer.
enum DfmStatus dfm_engine_new(const char *path, struct DfmEngine **out);

// Create an engine from TOML text.
//
// # Safety
// `text` must be a NUL-terminated string; `out` must be a valid pointer.
enum DfmStatus dfm_engine_from_toml(const char *text, struct DfmEngine **out);

// Release an engine. NULL is a no-op.
//
// # Safety
// `engine` must be a pointer previously returned by an engine constructor
// and not yet freed.
void dfm_engine_free(struct DfmEngine *engine);

// Run the engine's configured pipeline; on success `*out_json` receives a
// newly allocated JSON metric report (release with [`dfm_string_free`]).
//
// # Safety
// `engine` must be a live engine handle; `out_json` must be valid.
enum DfmStatus dfm_engine_run(const struct DfmEngine *engine, char **out_json);

// One seeded oracle generation under the engine's config. Writes up to
// `capacity` token ids into `out_tokens` and the true sequence length into
// `out_len`; fails with `BufferTooSmall` (after setting `*out_len`) when the
// buffer cannot hold the sequence.
//
// # Safety
// `out_tokens` must point to `capacity` writable u32 slots; `out_len` must
// be valid.
enum DfmStatus dfm_engine_generate(const struct DfmEngine *engine,
                                   uint64_t seed,
                                   uint32_t *out_tokens,
                                   uintptr_t capacity,
                                   uintptr_t *out_len);

// Total variation distance between two length-`len` distributions.
//
// # Safety
// `p` and `q` must point to `len` readable doubles; `out` must be valid.
enum DfmStatus dfm_tv_distance(const double *p, const double *q, uintptr_t len, double *out);

// Release a string allocated by this library. NULL is a no-op.
//
// # Safety
// `s` must originate from a `dfm_*` call that allocates strings.
void dfm_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DFM_FFI_H */
