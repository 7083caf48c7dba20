#ifndef DIFFCOM_H
#define DIFFCOM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DcStatus {
  DC_STATUS_OK = 0,
  DC_STATUS_NULL_POINTER = 1,
  DC_STATUS_IO = 2,
  DC_STATUS_PARSE = 3,
  DC_STATUS_CONFIG_MISMATCH = 4,
  DC_STATUS_CORRUPT_STREAM = 5,
  DC_STATUS_INVALID_ARGUMENT = 6,
  DC_STATUS_INTERNAL = 7,
  DC_STATUS_PANIC = 8,
} DcStatus;

// Opaque loaded model.
typedef struct DcModel DcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread (empty if none). Valid
// until the next failing call on the same thread.
const char *dc_last_error(void);

// Library version as a static NUL-terminated string.
const char *dc_version(void);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DcStatus dc_model_load(const char *path, struct DcModel **out);

// Releases a model; null is ignored.
//
// # Safety
// `model` must come from [`dc_model_load`] and not be used afterwards.
void dc_model_free(struct DcModel *model);

// Number of points the model works on.
//
// # Safety
// Pointers must be valid.
enum DcStatus dc_model_point_count(const struct DcModel *model, size_t *out);

// Compresses `n` points (`xyz`, row-major). `steps = 0` records the model's
// default DDIM step count. The stream is returned in `out_bytes`/`out_len`
// and must be released with [`dc_bytes_free`].
//
// # Safety
// `xyz` must hold `3·n` doubles; output pointers must be valid.
enum DcStatus dc_compress(const struct DcModel *model,
                          const double *xyz,
                          size_t n,
                          uint64_t seed,
                          uint32_t steps,
                          uint8_t **out_bytes,
                          size_t *out_len);

// Decompresses a stream. `steps = 0` uses the step count from the header.
// Points are returned row-major (`3·out_n` doubles) and must be released
// with [`dc_points_free`].
//
// # Safety
// `bytes` must hold `len` bytes; output pointers must be valid.
enum DcStatus dc_decompress(const struct DcModel *model,
                            const uint8_t *bytes,
                            size_t len,
                            uint32_t steps,
                            double **out_xyz,
                            size_t *out_n);

// Symmetric Chamfer distance (sum of mean squared nearest-neighbour distances).
//
// # Safety
// `a` and `b` must hold `3·na` and `3·nb` doubles.
enum DcStatus dc_chamfer(const double *a, size_t na, const double *b, size_t nb, double *out);

// # Safety
// `p`/`len` must come from [`dc_compress`].
void dc_bytes_free(uint8_t *p, size_t len);

// # Safety
// `p`/`n` must come from [`dc_decompress`].
void dc_points_free(double *p, size_t n);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIFFCOM_H */
