#ifndef LATSTAB_H
#define LATSTAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum LatstabStatus {
  LATSTAB_STATUS_OK = 0,
  LATSTAB_STATUS_NULL_POINTER = 1,
  LATSTAB_STATUS_INVALID_ARGUMENT = 2,
  LATSTAB_STATUS_CONFIG = 3,
  LATSTAB_STATUS_DEPENDENCY = 4,
  LATSTAB_STATUS_NUMERICAL = 5,
  LATSTAB_STATUS_STORE = 6,
  LATSTAB_STATUS_IO = 7,
  LATSTAB_STATUS_BUFFER_TOO_SMALL = 8,
  LATSTAB_STATUS_PANIC = 9,
  LATSTAB_STATUS_OTHER = 10,
} LatstabStatus;

/**
 * A trained echo state network.
 */
typedef struct LatstabEsn LatstabEsn;

/**
 * A Kuramoto-Sivashinsky solver on a fixed grid and step.
 */
typedef struct LatstabKsSolver LatstabKsSolver;

/**
 * A physical trajectory: `len` snapshots of `width` points.
 */
typedef struct LatstabTrajectory LatstabTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`) and returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t latstab_last_error(char *buf, size_t len);

/**
 * Creates a solver on `n_x` points over a domain of length `length`.
 *
 * # Safety
 * `solver` must be valid for writing one pointer.
 */
enum LatstabStatus latstab_ks_solver_new(double length,
                                         size_t n_x,
                                         double dt,
                                         struct LatstabKsSolver **solver);

/**
 * # Safety
 * `solver` must be null or a handle from [`latstab_ks_solver_new`] not yet freed.
 */
void latstab_ks_solver_free(struct LatstabKsSolver *solver);

/**
 * Advances `u` (length `n_x`) by `n_steps` steps in place.
 *
 * # Safety
 * `u` must be valid for `n_x` doubles.
 */
enum LatstabStatus latstab_ks_step(const struct LatstabKsSolver *solver,
                                   double *u,
                                   size_t n_x,
                                   size_t n_steps);

/**
 * Simulates from `u0` to `t_total`, dropping `[0, t_transient)` and keeping
 * every `sample_every`-th step.
 *
 * # Safety
 * `u0` must be valid for `n_x` doubles and `traj` for writing one pointer.
 */
enum LatstabStatus latstab_ks_simulate(const struct LatstabKsSolver *solver,
                                       const double *u0,
                                       size_t n_x,
                                       double t_total,
                                       double t_transient,
                                       size_t sample_every,
                                       struct LatstabTrajectory **traj);

/**
 * Leading `m` Lyapunov exponents of the KS flow from `u0`, written to `lambdas`.
 *
 * The average runs over `n_steps` solver steps after `n_transient` steps of
 * basis alignment, re-orthonormalizing every `ortho_every` steps.
 *
 * # Safety
 * `u0` must be valid for `n_x` doubles and `lambdas` for `m` doubles.
 */
enum LatstabStatus latstab_ks_lyapunov(const struct LatstabKsSolver *solver,
                                       const double *u0,
                                       size_t n_x,
                                       size_t m,
                                       size_t n_steps,
                                       size_t n_transient,
                                       size_t ortho_every,
                                       uint64_t seed,
                                       double *lambdas);

/**
 * Kaplan-Yorke dimension of a non-increasing spectrum.
 *
 * # Safety
 * `lambdas` must be valid for `m` doubles.
 */
enum LatstabStatus latstab_kaplan_yorke(const double *lambdas, size_t m, double *dimension);

/**
 * First Wasserstein distance between two empirical samples.
 *
 * # Safety
 * `a` and `b` must be valid for `n_a` and `n_b` doubles.
 */
enum LatstabStatus latstab_wasserstein1(const double *a,
                                        size_t n_a,
                                        const double *b,
                                        size_t n_b,
                                        double *distance);

/**
 * Loads a physical trajectory file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `traj` valid for writing one pointer.
 */
enum LatstabStatus latstab_trajectory_load(const char *path_, struct LatstabTrajectory **traj);

/**
 * Writes a trajectory file.
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum LatstabStatus latstab_trajectory_save(const struct LatstabTrajectory *traj, const char *path_);

/**
 * Number of snapshots, or 0 for a null handle.
 *
 * # Safety
 * `traj` must be null or a live handle.
 */
size_t latstab_trajectory_len(const struct LatstabTrajectory *traj);

/**
 * Points per snapshot, or 0 for a null handle.
 *
 * # Safety
 * `traj` must be null or a live handle.
 */
size_t latstab_trajectory_width(const struct LatstabTrajectory *traj);

/**
 * Copies snapshot `index` into `u` and its time into `t`.
 *
 * # Safety
 * `u` must be valid for `len` doubles and `t` for one double.
 */
enum LatstabStatus latstab_trajectory_snapshot(const struct LatstabTrajectory *traj,
                                               size_t index,
                                               double *u,
                                               size_t len,
                                               double *t);

/**
 * # Safety
 * `traj` must be null or a live handle.
 */
void latstab_trajectory_free(struct LatstabTrajectory *traj);

/**
 * Loads a trained echo state network.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `esn` valid for writing one pointer.
 */
enum LatstabStatus latstab_esn_load(const char *path_, struct LatstabEsn **esn);

/**
 * Latent dimension, or 0 for a null handle.
 *
 * # Safety
 * `esn` must be null or a live handle.
 */
size_t latstab_esn_n_lat(const struct LatstabEsn *esn);

/**
 * Reservoir size, or 0 for a null handle.
 *
 * # Safety
 * `esn` must be null or a live handle.
 */
size_t latstab_esn_n_r(const struct LatstabEsn *esn);

/**
 * Teacher-forces the reservoir with `n_warmup` latent vectors (row-major,
 * `n_warmup x n_lat`), then predicts `n_steps` vectors autonomously into
 * `prediction` (row-major, `n_steps x n_lat`).
 *
 * # Safety
 * `warmup` must be valid for `n_warmup * n_lat` doubles and `prediction` for
 * `n_steps * n_lat` doubles.
 */
enum LatstabStatus latstab_esn_closed_loop(const struct LatstabEsn *esn,
                                           const double *warmup,
                                           size_t n_warmup,
                                           size_t n_steps,
                                           double *prediction);

/**
 * # Safety
 * `esn` must be null or a live handle.
 */
void latstab_esn_free(struct LatstabEsn *esn);

/**
 * Runs one pipeline stage (`"generate-data"`, ..., `"compare"`) from a
 * configuration file. `workspace` may be null to use the configured one.
 *
 * # Safety
 * `config` and `stage` must be NUL-terminated strings; `workspace` null or one.
 */
enum LatstabStatus latstab_run_stage(const char *config, const char *stage, const char *workspace);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LATSTAB_H */
