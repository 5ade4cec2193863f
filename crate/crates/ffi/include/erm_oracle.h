#ifndef ERM_ORACLE_H
#define ERM_ORACLE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every function.
 */
typedef enum {
  ERM_STATUS_OK = 0,
  /**
   * A required pointer was null or a string was not UTF-8.
   */
  ERM_STATUS_NULL_OR_UTF8 = 1,
  /**
   * The configuration JSON did not parse or failed validation.
   */
  ERM_STATUS_CONFIG = 2,
  /**
   * A numeric precondition failed while evaluating.
   */
  ERM_STATUS_INVALID = 3,
  /**
   * A verification ran and at least one verdict failed.
   */
  ERM_STATUS_VIOLATION = 4,
  ERM_STATUS_IO = 5,
  ERM_STATUS_PANIC = 6,
} ErmStatus;

/**
 * An experiment configuration together with its built problem.
 */
typedef struct ErmProblem ErmProblem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread. The pointer stays valid
 * until the next failing call on the same thread. Never null.
 */
const char *erm_last_error(void);

/**
 * Writes `2 log(2p) / n` to `out`.
 *
 * # Safety
 * `out` must be null or point to writable memory for one `double`.
 */
ErmStatus erm_delta(double n, size_t p, double *out);

/**
 * Parses an experiment configuration (the same JSON the CLI reads) and
 * builds its problem.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` must be writable.
 */
ErmStatus erm_problem_new(const char *config_json, ErmProblem **out);

/**
 * Releases a problem. Null is ignored.
 *
 * # Safety
 * `problem` must come from [`erm_problem_new`] and not be used afterwards.
 */
void erm_problem_free(ErmProblem *problem);

/**
 * Sample size, candidate count and best-in-class excess risk.
 *
 * # Safety
 * `problem` must be live; each output may be null to skip it.
 */
ErmStatus erm_problem_info(const ErmProblem *problem, size_t *n, size_t *p, double *estar);

/**
 * Evaluates every bound named in the configuration and writes a JSON array
 * of reports to `out`.
 *
 * # Safety
 * `problem` must be live; `out` must be writable. Free the string with
 * [`erm_string_free`].
 */
ErmStatus erm_bounds_json(const ErmProblem *problem, char **out);

/**
 * Runs the configured verification and writes the verdicts as a JSON array.
 * `workers = 0` uses the default pool size. Returns `ERM_STATUS_VIOLATION`
 * (with `out` still set) when any verdict fails.
 *
 * # Safety
 * `problem` must be live; `out` must be writable. Free the string with
 * [`erm_string_free`].
 */
ErmStatus erm_verify_json(const ErmProblem *problem, size_t workers, char **out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void erm_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ERM_ORACLE_H */
