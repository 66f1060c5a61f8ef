#ifndef FLOWMIMIC_H
#define FLOWMIMIC_H

/* Generated by cbindgen from src/lib.rs; edits are overwritten. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FmStatus {
  FM_STATUS_OK = 0,
  FM_STATUS_NULL_POINTER = 1,
  FM_STATUS_INVALID_ARGUMENT = 2,
  FM_STATUS_CONFIG = 3,
  FM_STATUS_IO = 4,
  FM_STATUS_PARSE = 5,
  FM_STATUS_BUDGET_EXHAUSTED = 6,
  FM_STATUS_INTERNAL = 7,
  FM_STATUS_PANIC = 8,
} FmStatus;

typedef enum FmAttack {
  FM_ATTACK_BURST_FLOOD = 0,
  FM_ATTACK_BEACON = 1,
} FmAttack;

/**
 * A trained detector loaded from a run directory.
 */
typedef struct FmDetector FmDetector;

/**
 * A list of flows.
 */
typedef struct FmFlowSet FmFlowSet;

/**
 * A configured experiment run bound to its directory.
 */
typedef struct FmRun FmRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next call into the library on the same thread.
 */
const char *fm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fm_version(void);

/**
 * Loads flows from a CSV file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FmStatus fm_flows_load_csv(const char *path, struct FmFlowSet **out);

/**
 * Generates `count` synthetic malicious flows.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum FmStatus fm_flows_synth(enum FmAttack kind,
                             size_t count,
                             uint64_t seed,
                             struct FmFlowSet **out);

/**
 * Number of flows in the set; 0 for NULL.
 *
 * # Safety
 * `set` must be NULL or a handle from this library.
 */
size_t fm_flows_len(const struct FmFlowSet *set);

/**
 * Mean rate of flow `index` in Mbps.
 *
 * # Safety
 * `set` must be a handle from this library and `out` a valid pointer.
 */
enum FmStatus fm_flow_rate(const struct FmFlowSet *set, size_t index, double *out);

/**
 * # Safety
 * `set` must be NULL or a handle from this library not freed before.
 */
void fm_flows_free(struct FmFlowSet *set);

/**
 * Loads a detector saved by the `train-detector` stage.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FmStatus fm_detector_load(const char *dir, struct FmDetector **out);

/**
 * Writes 1 to `flagged` when the detector flags flow `index`, else 0.
 *
 * # Safety
 * Handles must come from this library and `flagged` must be valid.
 */
enum FmStatus fm_detector_flags(const struct FmDetector *det,
                                const struct FmFlowSet *set,
                                size_t index,
                                int32_t *flagged);

/**
 * # Safety
 * `det` must be NULL or a handle from this library not freed before.
 */
void fm_detector_free(struct FmDetector *det);

/**
 * KL divergence between two probability vectors of length `len`, with
 * `eps` added to each bin of `q`.
 *
 * # Safety
 * `p` and `q` must point to `len` doubles and `out` must be valid.
 */
enum FmStatus fm_kl_divergence(const double *p,
                               const double *q,
                               size_t len,
                               double eps,
                               double *out);

/**
 * Resolves a configuration (JSON text, or NULL for the desk defaults) and
 * opens its run directory. A non-NULL `out_dir` overrides `out`.
 *
 * # Safety
 * String arguments must be NULL or NUL-terminated; `out` must be valid.
 */
enum FmStatus fm_run_open(const char *config_json, const char *out_dir, struct FmRun **out);

/**
 * Runs one stage by its command-line name, e.g. `"gen-data"` or
 * `"pipeline"`. `"ablate"` runs every ablation arm.
 *
 * # Safety
 * `run` must be a handle from this library and `stage` NUL-terminated.
 */
enum FmStatus fm_run_stage(struct FmRun *run, const char *stage);

/**
 * # Safety
 * `run` must be NULL or a handle from this library not freed before.
 */
void fm_run_free(struct FmRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWMIMIC_H */
