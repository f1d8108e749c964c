#ifndef REGSTAB_H
#define REGSTAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RegstabStatus {
  REGSTAB_STATUS_OK = 0,
  REGSTAB_STATUS_NULL_POINTER = 1,
  REGSTAB_STATUS_INVALID_UTF8 = 2,
  // Malformed config, unknown system or MRF id.
  REGSTAB_STATUS_CONFIG = 3,
  REGSTAB_STATUS_INVALID_ARGUMENT = 4,
  // A state of the wrong dimension was passed.
  REGSTAB_STATUS_DIMENSION_MISMATCH = 5,
  REGSTAB_STATUS_NOT_CERTIFIED = 6,
  REGSTAB_STATUS_NUMERICAL = 7,
  REGSTAB_STATUS_IO = 8,
  // The library panicked; the handle involved should be freed.
  REGSTAB_STATUS_PANIC = 9,
} RegstabStatus;

// A control system paired with a minimum restraint function candidate.
typedef struct RegstabModel RegstabModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *regstab_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *regstab_version(void);

// Frees a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void regstab_string_free(char *s);

// Builds a model from a run configuration (JSON text); only `system`,
// `mrf` and `p0` are used.
//
// # Safety
// `config_json` must be a NUL-terminated string and `out` writable.
enum RegstabStatus regstab_model_from_json(const char *config_json, struct RegstabModel **out);

// Frees a model. Null is ignored.
//
// # Safety
// `model` must come from [`regstab_model_from_json`] and not have been freed.
void regstab_model_free(struct RegstabModel *model);

// State dimension of the model, 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t regstab_model_state_dim(const struct RegstabModel *model);

// `p0` of the model, NaN for a null handle.
//
// # Safety
// `model` must be null or a live handle.
double regstab_model_p0(const struct RegstabModel *model);

// `W(x)`.
//
// # Safety
// `x` must point to `len` doubles and `out` be writable.
enum RegstabStatus regstab_model_value(const struct RegstabModel *model,
                                       const double *x,
                                       size_t len,
                                       double *out);

// Distance from `x` to the target.
//
// # Safety
// `x` must point to `len` doubles and `out` be writable.
enum RegstabStatus regstab_model_distance(const struct RegstabModel *model,
                                          const double *x,
                                          size_t len,
                                          double *out);

// A (proximal) subgradient of `W` at `x`, written to `grad[0..len]`.
//
// # Safety
// `x` and `grad` must each point to `len` doubles.
enum RegstabStatus regstab_model_gradient(const struct RegstabModel *model,
                                          const double *x,
                                          size_t len,
                                          double *grad);

// Runs a subcommand (`certify`, `bridge`, `synthesize`, `simulate`,
// `euler`, `regularize`, `sweep`) on an in-memory config. The report JSON
// goes to `*report_json`, the exit code the command line would give to
// `*exit_code` (0 all checks passed, 2 some failed). `out_path` may be
// null; `seed` may be null to keep the config's seed.
//
// # Safety
// String arguments must be NUL-terminated; out-parameters writable.
enum RegstabStatus regstab_run(const char *command,
                               const char *config_json,
                               const char *out_path,
                               const uint64_t *seed,
                               char **report_json,
                               int32_t *exit_code);

// The command-line entry point: `argv[0]` is the program name.
//
// # Safety
// `argv` must point to `argc` NUL-terminated strings.
int regstab_run_command(int argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REGSTAB_H */
