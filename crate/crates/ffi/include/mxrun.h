#ifndef MXRUN_H
#define MXRUN_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum MxStatus {
  MX_STATUS_OK = 0,
  MX_STATUS_NULL_ARGUMENT = 1,
  MX_STATUS_INVALID_UTF8 = 2,
  MX_STATUS_CONFIG = 3,
  MX_STATUS_EXPAND = 4,
  MX_STATUS_STORE = 5,
  MX_STATUS_RUN = 6,
  MX_STATUS_OUT_OF_RANGE = 7,
  MX_STATUS_BUFFER_TOO_SMALL = 8,
  MX_STATUS_PANIC = 9,
} MxStatus;

/**
 * Terminal state of one task in a report.
 */
typedef enum MxTaskStatus {
  MX_TASK_STATUS_SUCCEEDED = 0,
  MX_TASK_STATUS_FAILED = 1,
  MX_TASK_STATUS_RESTORED = 2,
} MxTaskStatus;

/**
 * Output buffer passed to an [`MxTaskFn`]; its contents become the payload.
 */
typedef struct MxBuffer MxBuffer;

/**
 * Parsed configuration matrix.
 */
typedef struct MxConfig MxConfig;

/**
 * Expanded, ordered task list.
 */
typedef struct MxPlan MxPlan;

/**
 * Outcome of a run.
 */
typedef struct MxReport MxReport;

/**
 * Read-only view of the task passed to an [`MxTaskFn`].
 */
typedef struct MxTask MxTask;

typedef struct MxRunOptions {
  /**
   * Worker count; 0 means the number of logical CPUs.
   */
  uint32_t jobs;
  /**
   * Extra attempts for failed tasks.
   */
  uint32_t retries;
  /**
   * Per-task timeout for command runners; 0 disables it.
   */
  uint64_t timeout_ms;
  bool fail_fast;
  bool cache_failures;
} MxRunOptions;

/**
 * Task body. Return 0 for success; any other value marks the task failed.
 * Called concurrently from worker threads, so `user_data` must tolerate
 * shared access. `task` and `payload` are valid only during the call.
 */
typedef int32_t (*MxTaskFn)(void *user_data, const struct MxTask *task, struct MxBuffer *payload);

typedef struct MxCounts {
  size_t total;
  size_t succeeded;
  size_t failed;
  size_t restored;
  size_t executed;
} MxCounts;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mx_version(void);

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next mxrun call on this thread.
 */
const char *mx_last_error_message(void);

/**
 * Parses TOML source into a configuration handle.
 *
 * # Safety
 * `source` must be a NUL-terminated string; `out` must be writable.
 */
enum MxStatus mx_config_parse(const char *source, struct MxConfig **out);

/**
 * # Safety
 * `config` must be NULL or a handle from [`mx_config_parse`] not yet freed.
 */
void mx_config_free(struct MxConfig *config);

/**
 * Validates a configuration. Returns [`MxStatus::Config`] when any error
 * diagnostic exists; the last error message then lists all diagnostics, one
 * per line. Counts are written in both cases (either pointer may be NULL).
 *
 * # Safety
 * `config` must be a live handle.
 */
enum MxStatus mx_config_validate(const struct MxConfig *config,
                                 size_t *error_count,
                                 size_t *warning_count);

/**
 * Expands a configuration into a plan.
 *
 * # Safety
 * `config` must be a live handle; `out` must be writable.
 */
enum MxStatus mx_plan_expand(const struct MxConfig *config, struct MxPlan **out);

/**
 * Number of tasks in the plan (0 for NULL).
 *
 * # Safety
 * `plan` must be NULL or a live handle.
 */
size_t mx_plan_len(const struct MxPlan *plan);

/**
 * Number of combinations removed by exclusion rules (0 for NULL).
 *
 * # Safety
 * `plan` must be NULL or a live handle.
 */
size_t mx_plan_excluded(const struct MxPlan *plan);

/**
 * Writes the 64-character hex key of task `index` plus NUL into `out`,
 * which must hold at least 65 bytes.
 *
 * # Safety
 * `plan` must be a live handle; `out` must point to 65 writable bytes.
 */
enum MxStatus mx_plan_task_key(const struct MxPlan *plan, size_t index, char *out);

/**
 * Writes the configuration fingerprint (64 hex chars plus NUL) into `out`.
 *
 * # Safety
 * `plan` must be a live handle; `out` must point to 65 writable bytes.
 */
enum MxStatus mx_plan_fingerprint(const struct MxPlan *plan, char *out);

/**
 * # Safety
 * `plan` must be NULL or a handle from [`mx_plan_expand`] not yet freed.
 */
void mx_plan_free(struct MxPlan *plan);

/**
 * Defaults: logical-CPU workers, no retries, no timeout, full isolation.
 */
struct MxRunOptions mx_run_options_default(void);

/**
 * Runs every task as a shell command rendered from `command` (placeholders
 * `{name}` for dimensions and settings), caching results under `cache_dir`.
 * `options` may be NULL for defaults.
 *
 * # Safety
 * Pointers must be valid as documented; `out` must be writable.
 */
enum MxStatus mx_run_command(const struct MxPlan *plan,
                             const char *command,
                             const char *cache_dir,
                             const struct MxRunOptions *options,
                             struct MxReport **out);

/**
 * Runs every task by calling `callback`. Bytes written to the payload
 * buffer become the cached result.
 *
 * # Safety
 * `callback` must be safe to call concurrently with `user_data`; other
 * pointers as for [`mx_run_command`].
 */
enum MxStatus mx_run_callback(const struct MxPlan *plan,
                              MxTaskFn callback,
                              void *user_data,
                              const char *cache_dir,
                              const struct MxRunOptions *options,
                              struct MxReport **out);

/**
 * Copies the task's hex key (65 bytes with NUL) into `out`.
 *
 * # Safety
 * `task` must be the pointer passed to the running callback.
 */
enum MxStatus mx_task_key(const struct MxTask *task, char *out);

/**
 * Copies the value of dimension or setting `name` as text. Strings are
 * copied verbatim; numbers and booleans use their canonical spelling.
 *
 * # Safety
 * `task` must be the pointer passed to the running callback; see the module
 * docs for `(buf, cap, needed)`.
 */
enum MxStatus mx_task_get(const struct MxTask *task,
                          const char *name,
                          char *buf,
                          size_t cap,
                          size_t *needed);

/**
 * Appends `len` bytes to the payload.
 *
 * # Safety
 * `buffer` must be the pointer passed to the running callback; `data` must
 * point to `len` readable bytes (it may be NULL when `len` is 0).
 */
enum MxStatus mx_buffer_write(struct MxBuffer *buffer, const uint8_t *data, size_t len);

/**
 * # Safety
 * `report` must be a live handle; `out` must be writable.
 */
enum MxStatus mx_report_counts(const struct MxReport *report, struct MxCounts *out);

/**
 * Status of task `index` (plan order).
 *
 * # Safety
 * `report` must be a live handle; `out` must be writable.
 */
enum MxStatus mx_report_task_status(const struct MxReport *report,
                                    size_t index,
                                    enum MxTaskStatus *out);

/**
 * Borrows the payload of task `index`. `*data` is NULL and `*len` 0 when
 * the task has no payload. The bytes stay valid until the report is freed.
 *
 * # Safety
 * `report` must be a live handle; `data` and `len` must be writable.
 */
enum MxStatus mx_report_payload(const struct MxReport *report,
                                size_t index,
                                const uint8_t **data,
                                size_t *len);

/**
 * # Safety
 * `report` must be NULL or a handle from `mx_run_*` not yet freed.
 */
void mx_report_free(struct MxReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MXRUN_H */
