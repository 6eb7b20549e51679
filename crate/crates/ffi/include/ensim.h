#ifndef ENSIM_H
#define ENSIM_H

/* Generated with cbindgen:0.27.0 */

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EnsimStatus {
  ENSIM_STATUS_OK = 0,
  ENSIM_STATUS_NULL_POINTER = 1,
  ENSIM_STATUS_INVALID_UTF8 = 2,
  ENSIM_STATUS_CONFIG = 3,
  ENSIM_STATUS_RUNTIME = 4,
  ENSIM_STATUS_IO = 5,
  ENSIM_STATUS_PANIC = 6,
} EnsimStatus;

/**
 * Results of one simulation run.
 */
typedef struct EnsimReport EnsimReport;

/**
 * A parsed, validated scenario.
 */
typedef struct EnsimScenario EnsimScenario;

/**
 * Headline numbers of a run.
 */
typedef struct EnsimSummary {
  uint64_t queries;
  uint64_t completed;
  uint64_t failed;
  double latency_p50_ms;
  double latency_p99_ms;
  double slo_violation_fraction;
  double accuracy_met_fraction;
  double cumulative_accuracy;
  double time_avg_ensemble_size;
  double total_cost;
  uint64_t vms_launched;
  uint64_t vms_preempted;
} EnsimSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ensim_version(void);

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next library call on the same thread.
 */
const char *ensim_last_error(void);

/**
 * Majority-vote accuracy of `n` independent models.
 *
 * # Safety
 * `accuracies` must point to `n` readable doubles and `out` to one writable double.
 */
enum EnsimStatus ensim_estimate(const double *accuracies, size_t n, double *out);

/**
 * Parse a scenario from JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum EnsimStatus ensim_scenario_from_json(const char *json, struct EnsimScenario **out);

/**
 * Load a bundled scenario such as `strict_wiki`.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be writable.
 */
enum EnsimStatus ensim_scenario_bundled(const char *name, struct EnsimScenario **out);

/**
 * Load a scenario file; relative paths inside it resolve against its directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum EnsimStatus ensim_scenario_load(const char *path, struct EnsimScenario **out);

/**
 * # Safety
 * `scenario` must be a live handle.
 */
enum EnsimStatus ensim_scenario_set_seed(struct EnsimScenario *scenario, uint64_t seed);

/**
 * # Safety
 * `scenario` must be a live handle.
 */
enum EnsimStatus ensim_scenario_set_duration(struct EnsimScenario *scenario, double seconds);

/**
 * `policy` is one of `single-best`, `full-static`, `drop-one`, `dynamic`.
 *
 * # Safety
 * `scenario` must be a live handle; `policy` a NUL-terminated string.
 */
enum EnsimStatus ensim_scenario_set_policy(struct EnsimScenario *scenario, const char *policy);

/**
 * # Safety
 * `scenario` must be a live handle.
 */
enum EnsimStatus ensim_scenario_set_failure_probability(struct EnsimScenario *scenario, double p);

/**
 * The effective scenario as JSON; free with [`ensim_string_free`].
 *
 * # Safety
 * `scenario` must be a live handle; `out` must be writable.
 */
enum EnsimStatus ensim_scenario_to_json(const struct EnsimScenario *scenario, char **out);

/**
 * # Safety
 * `scenario` must be NULL or a handle not yet freed.
 */
void ensim_scenario_free(struct EnsimScenario *scenario);

/**
 * Simulate `scenario` to completion.
 *
 * # Safety
 * `scenario` must be a live handle; `out` must be writable.
 */
enum EnsimStatus ensim_run(const struct EnsimScenario *scenario, struct EnsimReport **out);

/**
 * # Safety
 * `report` must be a live handle; `out` must be writable.
 */
enum EnsimStatus ensim_report_summary(const struct EnsimReport *report, struct EnsimSummary *out);

/**
 * The full `summary.json` body; free with [`ensim_string_free`].
 *
 * # Safety
 * `report` must be a live handle; `out` must be writable.
 */
enum EnsimStatus ensim_report_summary_json(const struct EnsimReport *report, char **out);

/**
 * Write the four report files into `dir`, creating it if needed.
 *
 * # Safety
 * `report` must be a live handle; `dir` a NUL-terminated string.
 */
enum EnsimStatus ensim_report_write(const struct EnsimReport *report, const char *dir);

/**
 * # Safety
 * `report` must be NULL or a handle not yet freed.
 */
void ensim_report_free(struct EnsimReport *report);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library and not yet freed.
 */
void ensim_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ENSIM_H */
