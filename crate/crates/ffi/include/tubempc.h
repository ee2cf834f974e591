#ifndef TUBEMPC_H
#define TUBEMPC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes of every fallible call.
typedef enum TubempcStatus {
  TUBEMPC_STATUS_OK = 0,
  TUBEMPC_STATUS_NULL_ARGUMENT = 1,
  TUBEMPC_STATUS_INVALID_ARGUMENT = 2,
  // A design certificate failed; the message names it.
  TUBEMPC_STATUS_CERTIFICATION = 3,
  // The controller found no feasible plan.
  TUBEMPC_STATUS_INFEASIBLE = 4,
  // Any other library error.
  TUBEMPC_STATUS_FAILED = 5,
  // The output buffer is too small; the required size was reported.
  TUBEMPC_STATUS_BUFFER_TOO_SMALL = 6,
  TUBEMPC_STATUS_PANIC = 7,
} TubempcStatus;

typedef enum TubempcCase {
  TUBEMPC_CASE_CASE1 = 1,
  TUBEMPC_CASE_CASE2 = 2,
} TubempcCase;

typedef enum TubempcControllerKind {
  TUBEMPC_CONTROLLER_KIND_TMPC = 0,
  TUBEMPC_CONTROLLER_KIND_PARENT_CHILD = 1,
  TUBEMPC_CONTROLLER_KIND_DETERMINISTIC = 2,
  TUBEMPC_CONTROLLER_KIND_TMPC_EXTENDED = 3,
} TubempcControllerKind;

// Opaque controller; owns its own copy of the design data.
typedef struct TubempcController TubempcController;

// Opaque design bundle.
typedef struct TubempcDesign TubempcDesign;

// Summary of a closed-loop run. Absent steps are -1.
typedef struct TubempcSummary {
  double final_cost;
  int64_t switch_step;
  int64_t infeasible_step;
  double mean_t_child_us;
  double mean_t_parent_us;
  uint64_t steps_run;
} TubempcSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copy the last error message of this thread into `buf` as a
// NUL-terminated string. Returns the message length without the NUL;
// nothing is written when `buf` is null or `len` is too small.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t tubempc_last_error_message(char *buf, size_t len);

// Design and certify a preset case.
//
// # Safety
// `out` must be a valid pointer to writable storage.
enum TubempcStatus tubempc_design_new(enum TubempcCase case_, struct TubempcDesign **out);

// Load a design bundle from JSON and recompute its certificates.
//
// # Safety
// `json` must be a NUL-terminated string; `out` a valid pointer.
enum TubempcStatus tubempc_design_from_json(const char *json, struct TubempcDesign **out);

// Serialize a design to JSON. `written` receives the length without the
// NUL terminator; when `len` is too small nothing is copied and
// `BufferTooSmall` is returned.
//
// # Safety
// `design` must come from this library; `buf` must be null or valid for
// `len` bytes; `written` must be valid.
enum TubempcStatus tubempc_design_to_json(const struct TubempcDesign *design,
                                          char *buf,
                                          size_t len,
                                          size_t *written);

// State and input dimensions of a design.
//
// # Safety
// `design` must come from this library; `n` and `m` must be valid.
enum TubempcStatus tubempc_design_dims(const struct TubempcDesign *design, size_t *n, size_t *m);

// # Safety
// `design` must be null or come from this library, and not be used again.
void tubempc_design_free(struct TubempcDesign *design);

// Build a controller of `kind` from a design. The design may be freed
// afterwards.
//
// # Safety
// `design` must come from this library; `out` must be valid.
enum TubempcStatus tubempc_controller_new(const struct TubempcDesign *design,
                                          enum TubempcControllerKind kind,
                                          struct TubempcController **out);

// One control step: reads `n` states from `x`, writes `m` inputs to `u`.
//
// # Safety
// `controller` must come from this library; `x` valid for `n` reads and
// `u` for `m` writes.
enum TubempcStatus tubempc_controller_step(struct TubempcController *controller,
                                           const double *x,
                                           size_t n,
                                           double *u,
                                           size_t m);

// Forget all plans so the next step starts from scratch.
//
// # Safety
// `controller` must come from this library.
enum TubempcStatus tubempc_controller_reset(struct TubempcController *controller);

// # Safety
// `controller` must be null or come from this library, and not be used again.
void tubempc_controller_free(struct TubempcController *controller);

// Seeded closed-loop run with uniform disturbances from the design's start
// state. Controller infeasibility is reported in the summary, not as an
// error.
//
// # Safety
// `design` must come from this library; `out` must be valid.
enum TubempcStatus tubempc_run(const struct TubempcDesign *design,
                               enum TubempcControllerKind kind,
                               size_t steps,
                               uint64_t seed,
                               struct TubempcSummary *out);

// Plant update `A x + g(x) + B u + w` of the design's system.
//
// # Safety
// `design` must come from this library; `x`, `w` and `x_next` valid for
// `n` values and `u` for `m`.
enum TubempcStatus tubempc_plant_step(const struct TubempcDesign *design,
                                      const double *x,
                                      const double *u,
                                      const double *w,
                                      double *x_next);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TUBEMPC_H */
