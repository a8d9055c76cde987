#ifndef AIRFEEL_H
#define AIRFEEL_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum AirfeelPolicy {
  AIRFEEL_POLICY_CASE_I = 0,
  AIRFEEL_POLICY_CASE_II = 1,
  AIRFEEL_POLICY_FIXED_POWER = 2,
  AIRFEEL_POLICY_MSE_MIN = 3,
  AIRFEEL_POLICY_CHANNEL_INVERSION = 4,
} AirfeelPolicy;

typedef enum AirfeelStatus {
  AIRFEEL_STATUS_OK = 0,
  AIRFEEL_STATUS_NULL_POINTER = 1,
  AIRFEEL_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Unbiased aggregation cannot be met on this trace.
   */
  AIRFEEL_STATUS_INFEASIBLE = 3,
  /**
   * The solver stopped before its tolerance. The schedule is still
   * returned.
   */
  AIRFEEL_STATUS_UNCONVERGED = 4,
  /**
   * A buffer is shorter than `devices * rounds`.
   */
  AIRFEEL_STATUS_BUFFER_TOO_SMALL = 5,
  AIRFEEL_STATUS_IO = 6,
  AIRFEEL_STATUS_PANIC = 7,
} AirfeelStatus;

/**
 * Opaque problem handle.
 */
typedef struct AirfeelProblem AirfeelProblem;

/**
 * Opaque schedule handle.
 */
typedef struct AirfeelSchedule AirfeelSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. Valid until the next
 * failing call on the same thread.
 */
const char *airfeel_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *airfeel_version(void);

/**
 * Builds a problem.
 *
 * `config_toml` may be NULL for the defaults. With `gains` NULL the channel
 * of trial `trial` is drawn from the configured seed; otherwise `gains`
 * holds `gains_len = devices * rounds` round-major magnitudes.
 *
 * # Safety
 * `config_toml` is NULL or a NUL-terminated string. `gains` is NULL or
 * points to `gains_len` readable doubles. `out` is writable.
 */
enum AirfeelStatus airfeel_problem_new(const char *config_toml,
                                       const double *gains,
                                       size_t gains_len,
                                       uint64_t trial,
                                       struct AirfeelProblem **out);

/**
 * # Safety
 * `problem` is NULL or a handle from [`airfeel_problem_new`] not yet freed.
 */
void airfeel_problem_free(struct AirfeelProblem *problem);

/**
 * # Safety
 * `problem` is a live handle; `devices` and `rounds` are writable.
 */
enum AirfeelStatus airfeel_problem_shape(const struct AirfeelProblem *problem,
                                         size_t *devices,
                                         size_t *rounds);

/**
 * Copies the channel gains, round-major.
 *
 * # Safety
 * `problem` is a live handle and `buf` points to `len` writable doubles.
 */
enum AirfeelStatus airfeel_problem_gains(const struct AirfeelProblem *problem,
                                         double *buf,
                                         size_t len);

/**
 * Certified bracket `[l_star, upper]` on the largest aligned level reachable
 * in every round, and whether it reaches the device count.
 *
 * # Safety
 * `problem` is a live handle; the output pointers are writable.
 */
enum AirfeelStatus airfeel_feasibility(const struct AirfeelProblem *problem,
                                       double *l_star,
                                       double *upper,
                                       bool *feasible);

/**
 * Solves for the schedule of `policy`.
 *
 * Returns [`AirfeelStatus::Infeasible`] with `*out` NULL when Case II cannot
 * be met, and [`AirfeelStatus::Unconverged`] with `*out` set when the
 * solver stopped early.
 *
 * # Safety
 * `problem` is a live handle and `out` is writable.
 */
enum AirfeelStatus airfeel_solve(const struct AirfeelProblem *problem,
                                 enum AirfeelPolicy policy,
                                 struct AirfeelSchedule **out);

/**
 * # Safety
 * `schedule` is NULL or a handle from [`airfeel_solve`] not yet freed.
 */
void airfeel_schedule_free(struct AirfeelSchedule *schedule);

/**
 * Objective of the schedule: the bound gap for Case I, the noise term
 * for Case II.
 *
 * # Safety
 * `schedule` is a live handle and `objective` is writable.
 */
enum AirfeelStatus airfeel_schedule_objective(const struct AirfeelSchedule *schedule,
                                              double *objective);

/**
 * # Safety
 * `schedule` is a live handle and `buf` points to `len` writable doubles.
 */
enum AirfeelStatus airfeel_schedule_powers(const struct AirfeelSchedule *schedule,
                                           double *buf,
                                           size_t len);

/**
 * Amplitudes `√p`, round-major.
 *
 * # Safety
 * `schedule` is a live handle and `buf` points to `len` writable doubles.
 */
enum AirfeelStatus airfeel_schedule_amplitudes(const struct AirfeelSchedule *schedule,
                                               double *buf,
                                               size_t len);

/**
 * Mean power each device spends per round, `devices` entries.
 *
 * # Safety
 * `schedule` is a live handle and `buf` points to `len` writable doubles.
 */
enum AirfeelStatus airfeel_schedule_usage(const struct AirfeelSchedule *schedule,
                                          double *buf,
                                          size_t len);

/**
 * Largest KKT residuals of the schedule against its own problem.
 *
 * # Safety
 * `schedule` is a live handle; the output pointers are writable.
 */
enum AirfeelStatus airfeel_schedule_kkt(const struct AirfeelSchedule *schedule,
                                        double *stationarity,
                                        double *violation,
                                        double *slackness);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AIRFEEL_H */
