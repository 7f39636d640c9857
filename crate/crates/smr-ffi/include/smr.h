#ifndef SMR_H
#define SMR_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. Values are stable.
 */
typedef enum SmrStatus {
  SMR_STATUS_OK = 0,
  SMR_STATUS_NULL_POINTER = 1,
  /**
   * Bad dimensions, parameters out of range or malformed input.
   */
  SMR_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A certificate or solve failed, or the right-hand side is inconsistent.
   */
  SMR_STATUS_ALGORITHM_FAILURE = 3,
  /**
   * Caller buffer is too small; the required length is reported.
   */
  SMR_STATUS_BUFFER_TOO_SMALL = 4,
  SMR_STATUS_PANIC = 5,
} SmrStatus;

/**
 * Solver family for `smr_solve`.
 */
typedef enum SmrSolveMode {
  /**
   * A with an unknown Laplacian L, gamma·A ⪯ L ⪯ A.
   */
  SMR_SOLVE_MODE_PERTURBED = 0,
  /**
   * A is the inverse of a symmetric M-matrix.
   */
  SMR_SOLVE_MODE_M_INVERSE = 1,
  /**
   * A is the pseudoinverse of a Laplacian.
   */
  SMR_SOLVE_MODE_LAPLACIAN_PINV = 2,
} SmrSolveMode;

/**
 * Opaque symmetric matrix.
 */
typedef struct SmrMatrix SmrMatrix;

/**
 * Opaque recovery result.
 */
typedef struct SmrRecovery SmrRecovery;

/**
 * Certificate of a recovery: lo·B ⪯ X ⪯ B holds when `holds` is nonzero.
 */
typedef struct SmrCertificate {
  double lo;
  double lambda_min;
  double lambda_max;
  int32_t holds;
  size_t iterations;
} SmrCertificate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *smr_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *smr_version(void);

/**
 * Builds a matrix from n·n row-major entries. The input must be symmetric
 * up to a relative 1e-12.
 *
 * # Safety
 * `data` must point to n·n readable doubles and `out` to a writable pointer.
 */
enum SmrStatus smr_matrix_new(size_t n, const double *data, struct SmrMatrix **out);

/**
 * Dimension of a matrix, 0 for null.
 *
 * # Safety
 * `m` must be null or a live handle from `smr_matrix_new`.
 */
size_t smr_matrix_dim(const struct SmrMatrix *m);

/**
 * # Safety
 * `m` must be null or a live handle; it is invalid afterwards.
 */
void smr_matrix_free(struct SmrMatrix *m);

/**
 * Recovers nonnegative weights w over a basis family with
 * (1 − 15·eps)·gamma·B ⪯ Σ w_i·M_i ⪯ B, where B is the given matrix. `basis`
 * names a family ("diag", "edges", "sdd", "edges-ones") or a manifest path.
 *
 * # Safety
 * `b` must be a live handle, `basis` a NUL-terminated string and `out` a
 * writable pointer.
 */
enum SmrStatus smr_recover(const struct SmrMatrix *b,
                           const char *basis,
                           double eps,
                           double gamma,
                           uint64_t seed,
                           struct SmrRecovery **out);

/**
 * Number of basis weights, 0 for null.
 *
 * # Safety
 * `r` must be null or a live handle.
 */
size_t smr_recovery_len(const struct SmrRecovery *r);

/**
 * Copies all weights into `buf`. `*len` holds the buffer capacity on entry
 * and the number of weights on return.
 *
 * # Safety
 * `r` must be a live handle, `len` writable and `buf` writable for `*len`
 * doubles.
 */
enum SmrStatus smr_recovery_weights(const struct SmrRecovery *r, double *buf, size_t *len);

/**
 * # Safety
 * `r` must be a live handle and `out` writable.
 */
enum SmrStatus smr_recovery_certificate(const struct SmrRecovery *r, struct SmrCertificate *out);

/**
 * # Safety
 * `r` must be null or a live handle; it is invalid afterwards.
 */
void smr_recovery_free(struct SmrRecovery *r);

/**
 * Solves a·x = b with the chosen solver. `gamma` is used by the perturbed
 * mode only. Writes n doubles to `x` and the relative residual to
 * `residual` (may be null).
 *
 * # Safety
 * `a` must be a live handle, `b` readable and `x` writable for `len`
 * doubles, with `len` equal to the matrix dimension.
 */
enum SmrStatus smr_solve(const struct SmrMatrix *a,
                         enum SmrSolveMode mode,
                         double gamma,
                         double eps,
                         const double *b,
                         double *x,
                         size_t len,
                         double *residual);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SMR_H */
