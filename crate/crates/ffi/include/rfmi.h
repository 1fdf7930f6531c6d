#ifndef RFMI_H
#define RFMI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum RfmiStatus {
  RFMI_STATUS_OK = 0,
  RFMI_STATUS_NULL_POINTER = 1,
  RFMI_STATUS_INVALID_UTF8 = 2,
  RFMI_STATUS_CONFIG = 3,
  RFMI_STATUS_NUMERICAL = 4,
  RFMI_STATUS_IO = 5,
  RFMI_STATUS_FORMAT = 6,
  RFMI_STATUS_BUFFER_TOO_SMALL = 7,
  RFMI_STATUS_PANIC = 8,
} RfmiStatus;

// A trained conditional flow model.
typedef struct RfmiModel RfmiModel;

// A synthetic task with known mutual information.
typedef struct RfmiTask RfmiTask;

// One MI estimate in nats.
typedef struct RfmiEstimate {
  double value;
  double std_error;
  uint64_t n_y;
  uint64_t n_t;
  uint64_t n_x;
  uint64_t seed;
  double wall_time_s;
  // 0 data-coupled, 1 trajectory, 2 analytic field, 3 InfoNCE.
  uint32_t estimator;
} RfmiEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *rfmi_version(void);

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *rfmi_last_error(void);

// Builds a task from a JSON task spec such as
// `{"family": "correlated-gaussian", "rho": [0.9]}`.
//
// # Safety
// `spec_json` must be a NUL-terminated string and `out` a valid pointer.
enum RfmiStatus rfmi_task_new(const char *spec_json, struct RfmiTask **out);

// # Safety
// `task` must come from [`rfmi_task_new`] and not be used afterwards. Null is ignored.
void rfmi_task_free(struct RfmiTask *task);

// Ground-truth mutual information of the task in nats.
//
// # Safety
// Pointers must be valid.
enum RfmiStatus rfmi_task_true_mi(const struct RfmiTask *task, double *out);

// Dimensions of the data and of the encoded condition.
//
// # Safety
// Pointers must be valid.
enum RfmiStatus rfmi_task_dims(const struct RfmiTask *task,
                               uintptr_t *data_dim,
                               uintptr_t *condition_dim);

// Draws `n` joint samples into row-major buffers of `n * data_dim` and
// `n * condition_dim` doubles.
//
// # Safety
// `x` and `y` must point to at least `x_len` and `y_len` writable doubles.
enum RfmiStatus rfmi_task_sample(const struct RfmiTask *task,
                                 uintptr_t n,
                                 uint64_t seed,
                                 double *x,
                                 uintptr_t x_len,
                                 double *y,
                                 uintptr_t y_len);

// Loads a model file written by `rfmi train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum RfmiStatus rfmi_model_load(const char *path, struct RfmiModel **out);

// # Safety
// `model` must come from [`rfmi_model_load`] and not be used afterwards. Null is ignored.
void rfmi_model_free(struct RfmiModel *model);

// Estimates I(X; Y) for `task`. With a null `model` the task's analytic
// velocity field is used. `config_json` may be null for the defaults.
//
// # Safety
// Non-null pointers must be valid; strings must be NUL-terminated.
enum RfmiStatus rfmi_estimate(const struct RfmiModel *model,
                              const struct RfmiTask *task,
                              const char *config_json,
                              struct RfmiEstimate *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RFMI_H */
