#ifndef QPNLS_H
#define QPNLS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum QpnlsStatus {
  QPNLS_STATUS_OK = 0,
  QPNLS_STATUS_NULL_POINTER = 1,
  QPNLS_STATUS_INVALID_UTF8 = 2,
  QPNLS_STATUS_CONFIG = 3,
  QPNLS_STATUS_NOT_GENERIC = 4,
  QPNLS_STATUS_TRUNCATED = 5,
  QPNLS_STATUS_EXCISED = 6,
  QPNLS_STATUS_NOT_RUN = 7,
  QPNLS_STATUS_BUFFER_TOO_SMALL = 8,
  QPNLS_STATUS_INTERNAL = 9,
  QPNLS_STATUS_PANIC = 10,
} QpnlsStatus;

// Opaque solver handle.
typedef struct QpnlsSolver QpnlsSolver;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Owned by the
// library and valid until the next failing call on the same thread.
const char *qpnls_last_error(void);

// Library version as a static NUL-terminated string.
const char *qpnls_version(void);

// Parses `config_json` and stores a new handle in `*out`.
//
// # Safety
// `config_json` must be a NUL-terminated string and `out` a valid pointer.
enum QpnlsStatus qpnls_solver_new(const char *config_json, struct QpnlsSolver **out);

// Releases a handle; null is ignored.
//
// # Safety
// `solver` must come from `qpnls_solver_new` and not be used afterwards.
void qpnls_solver_free(struct QpnlsSolver *solver);

// Runs the iteration. Converged and step-limited runs return `Ok`; an
// excised run returns `Excised` but keeps its trace for inspection.
//
// # Safety
// `solver` must be a live handle.
enum QpnlsStatus qpnls_solver_run(struct QpnlsSolver *solver);

// Number of frequencies `b` of the configured problem.
//
// # Safety
// `solver` must be a live handle and `out` a valid pointer.
enum QpnlsStatus qpnls_solver_frequency_count(const struct QpnlsSolver *solver, size_t *out);

// Copies the final frequencies into `buf`; `len` must be at least the frequency count.
//
// # Safety
// `buf` must point to `len` writable doubles.
enum QpnlsStatus qpnls_solver_omega(const struct QpnlsSolver *solver, double *buf, size_t len);

// Final Fourier residual and number of Newton steps taken.
//
// # Safety
// `residual` and `steps` must be valid pointers.
enum QpnlsStatus qpnls_solver_summary(const struct QpnlsSolver *solver,
                                      double *residual,
                                      size_t *steps);

// Full iteration trace as JSON in `*out`, released with `qpnls_string_free`.
//
// # Safety
// `out` must be a valid pointer.
enum QpnlsStatus qpnls_solver_trace_json(const struct QpnlsSolver *solver, char **out);

// Genericity report for the support in `config_json`, as JSON in `*out`.
// Returns `NotGeneric` or `Truncated` according to the verdict, with the
// report written in every case.
//
// # Safety
// `config_json` must be a NUL-terminated string and `out` a valid pointer.
enum QpnlsStatus qpnls_genericity_json(const char *config_json, char **out);

// Releases a string returned by this library; null is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void qpnls_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QPNLS_H */
