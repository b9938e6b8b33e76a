#ifndef PLATOON_H
#define PLATOON_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every fallible call.
 */
typedef enum PlatoonStatus {
  PLATOON_STATUS_OK = 0,
  PLATOON_STATUS_NULL_POINTER = 1,
  PLATOON_STATUS_INVALID_ARGUMENT = 2,
  PLATOON_STATUS_CONFIG = 3,
  PLATOON_STATUS_RUNTIME = 4,
  PLATOON_STATUS_PANIC = 5,
} PlatoonStatus;

/**
 * Experiment configuration.
 */
typedef struct PlatoonConfig PlatoonConfig;

/**
 * Safe set for one predecessor speed.
 */
typedef struct PlatoonSafeSet PlatoonSafeSet;

/**
 * Result of a closed-loop simulation.
 */
typedef struct PlatoonSimLog PlatoonSimLog;

/**
 * Run-level safety figures.
 */
typedef struct PlatoonSummary {
  double min_headway;
  double max_slack;
  double max_kkt_residual;
  size_t fallbacks;
  size_t violations;
} PlatoonSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *platoon_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *platoon_version(void);

/**
 * Nominal configuration.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum PlatoonStatus platoon_config_default(struct PlatoonConfig **out);

/**
 * Parses a TOML document.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` valid for writes.
 */
enum PlatoonStatus platoon_config_from_toml(const char *toml, struct PlatoonConfig **out);

/**
 * Sets the trust horizon `F`.
 *
 * # Safety
 * `config` must be a live handle.
 */
enum PlatoonStatus platoon_config_set_trust(struct PlatoonConfig *config, size_t trust);

/**
 * SHA-256 of the canonical configuration, written as 64 hex digits plus a
 * NUL into `buf`, which must hold at least 65 bytes.
 *
 * # Safety
 * `config` must be a live handle and `buf` valid for `len` bytes.
 */
enum PlatoonStatus platoon_config_hash(const struct PlatoonConfig *config, char *buf, size_t len);

/**
 * # Safety
 * `config` must be NULL or a handle not yet freed.
 */
void platoon_config_free(struct PlatoonConfig *config);

/**
 * Builds the safe set for predecessor speed `v0` under the braking
 * assumptions of `config`.
 *
 * # Safety
 * `config` must be a live handle and `out` valid for writes.
 */
enum PlatoonStatus platoon_safe_set_build(const struct PlatoonConfig *config,
                                          double v0,
                                          struct PlatoonSafeSet **out);

/**
 * Number of boundary vertices.
 *
 * # Safety
 * `set` must be NULL or a live handle.
 */
size_t platoon_safe_set_vertex_count(const struct PlatoonSafeSet *set);

/**
 * Boundary vertex `index` as `(v, h)`.
 *
 * # Safety
 * `set` must be a live handle; `v` and `h` valid for writes.
 */
enum PlatoonStatus platoon_safe_set_vertex(const struct PlatoonSafeSet *set,
                                           size_t index,
                                           double *v,
                                           double *h);

/**
 * Halfspace membership of the follower state `(h, v)`.
 *
 * # Safety
 * `set` must be a live handle and `out` valid for writes.
 */
enum PlatoonStatus platoon_safe_set_contains(const struct PlatoonSafeSet *set,
                                             double h,
                                             double v,
                                             bool *out);

/**
 * # Safety
 * `set` must be NULL or a handle not yet freed.
 */
void platoon_safe_set_free(struct PlatoonSafeSet *set);

/**
 * Runs the closed-loop scenario of `config`.
 *
 * # Safety
 * `config` must be a live handle and `out` valid for writes.
 */
enum PlatoonStatus platoon_simulate(const struct PlatoonConfig *config, struct PlatoonSimLog **out);

/**
 * Number of recorded steps.
 *
 * # Safety
 * `log` must be NULL or a live handle.
 */
size_t platoon_sim_log_steps(const struct PlatoonSimLog *log);

/**
 * Number of vehicles.
 *
 * # Safety
 * `log` must be NULL or a live handle.
 */
size_t platoon_sim_log_vehicles(const struct PlatoonSimLog *log);

/**
 * Position, velocity and applied torque of `vehicle` at `step`.
 *
 * # Safety
 * `log` must be a live handle; `p`, `v` and `u` valid for writes.
 */
enum PlatoonStatus platoon_sim_log_state(const struct PlatoonSimLog *log,
                                         size_t step,
                                         size_t vehicle,
                                         double *p,
                                         double *v,
                                         double *u);

/**
 * Vehicles per hour past position `ell`.
 *
 * # Safety
 * `log` must be a live handle and `vph` valid for writes.
 */
enum PlatoonStatus platoon_sim_log_throughput(const struct PlatoonSimLog *log,
                                              double ell,
                                              double *vph);

/**
 * # Safety
 * `log` must be a live handle and `out` valid for writes.
 */
enum PlatoonStatus platoon_sim_log_summary(const struct PlatoonSimLog *log,
                                           struct PlatoonSummary *out);

/**
 * Writes the trajectory CSV to `path`.
 *
 * # Safety
 * `log` must be a live handle and `path` a NUL-terminated string.
 */
enum PlatoonStatus platoon_sim_log_write_csv(const struct PlatoonSimLog *log, const char *path);

/**
 * # Safety
 * `log` must be NULL or a handle not yet freed.
 */
void platoon_sim_log_free(struct PlatoonSimLog *log);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PLATOON_H */
