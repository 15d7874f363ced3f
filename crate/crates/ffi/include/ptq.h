#ifndef PTQ_H
#define PTQ_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PtqStatus {
  PTQ_STATUS_OK = 0,
  PTQ_STATUS_NULL_POINTER = 1,
  PTQ_STATUS_INVALID_ARGUMENT = 2,
  PTQ_STATUS_IO = 3,
  PTQ_STATUS_FORMAT = 4,
  PTQ_STATUS_NOT_FOUND = 5,
  PTQ_STATUS_NUMERIC = 6,
  PTQ_STATUS_BUFFER_TOO_SMALL = 7,
  PTQ_STATUS_INTERNAL = 8,
} PtqStatus;

typedef enum PtqMethod {
  PTQ_METHOD_LQ = 0,
  PTQ_METHOD_ACIQ = 1,
  PTQ_METHOD_OCS_NAIVE = 2,
  PTQ_METHOD_OCS_QA = 3,
} PtqMethod;

/**
 * Opaque archive handle.
 */
typedef struct PtqArchive PtqArchive;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on this thread.
 */
const char *ptq_last_error_message(void);

const char *ptq_version(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PtqStatus ptq_archive_read_file(const char *path, struct PtqArchive **out);

/**
 * # Safety
 * `data` must point to `len` readable bytes and `out` be a valid pointer.
 */
enum PtqStatus ptq_archive_read_bytes(const uint8_t *data, size_t len, struct PtqArchive **out);

/**
 * # Safety
 * `archive` must come from this library and `path` be NUL-terminated.
 */
enum PtqStatus ptq_archive_write_file(const struct PtqArchive *archive, const char *path);

/**
 * # Safety
 * `archive` must come from this library (or be null) and not be used afterwards.
 */
void ptq_archive_free(struct PtqArchive *archive);

/**
 * Number of tensors, or 0 for a null handle.
 *
 * # Safety
 * `archive` must come from this library or be null.
 */
size_t ptq_archive_tensor_count(const struct PtqArchive *archive);

/**
 * Name of tensor `index`, owned by the handle; null when out of range.
 *
 * # Safety
 * `archive` must come from this library or be null.
 */
const char *ptq_archive_tensor_name(const struct PtqArchive *archive, size_t index);

/**
 * Copies a float32 tensor into `out` (capacity `cap` elements) and stores
 * its element count in `len`. With `out` null only `len` is written.
 *
 * # Safety
 * `out` must have room for `cap` floats; other pointers must be valid.
 */
enum PtqStatus ptq_archive_tensor_f32(const struct PtqArchive *archive,
                                      const char *name,
                                      float *out,
                                      size_t cap,
                                      size_t *len);

/**
 * Quantizes with the default policy (skip patterns and minimum size) at
 * the given method, bits and OCS expansion ratio.
 *
 * # Safety
 * `archive` must come from this library and `out` be a valid pointer.
 */
enum PtqStatus ptq_quantize_archive(const struct PtqArchive *archive,
                                    enum PtqMethod method,
                                    uint32_t bits,
                                    double ocs_ratio,
                                    struct PtqArchive **out);

/**
 * # Safety
 * `archive` must come from this library and `out` be a valid pointer.
 */
enum PtqStatus ptq_dequantize_archive(const struct PtqArchive *archive, struct PtqArchive **out);

/**
 * # Safety
 * `step` must be a valid pointer.
 */
enum PtqStatus ptq_compute_step(double max_abs, uint32_t bits, float *step);

/**
 * Optimal clipping threshold for a Gaussian of standard deviation `sigma`.
 *
 * # Safety
 * `alpha` must be a valid pointer.
 */
enum PtqStatus ptq_aciq_solve_alpha(double sigma, uint32_t bits, double *alpha);

/**
 * Symmetric linear quantization of `len` floats into `codes`.
 *
 * # Safety
 * `data` must hold `len` floats, `codes` room for `len` bytes, `step` be valid.
 */
enum PtqStatus ptq_quantize_lq(const float *data,
                               size_t len,
                               uint32_t bits,
                               int8_t *codes,
                               float *step);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PTQ_H */
