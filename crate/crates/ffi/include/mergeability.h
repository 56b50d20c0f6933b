#ifndef MERGEABILITY_H
#define MERGEABILITY_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum MrgStatus {
  MRG_STATUS_OK = 0,
  MRG_STATUS_NULL_POINTER = 1,
  MRG_STATUS_INVALID_ARGUMENT = 2,
  MRG_STATUS_IO = 3,
  MRG_STATUS_FORMAT = 4,
  MRG_STATUS_SHAPE = 5,
  MRG_STATUS_MERGE = 6,
  MRG_STATUS_NUMERIC = 7,
  MRG_STATUS_PANIC = 8,
} MrgStatus;

typedef enum MrgAlgorithm {
  MRG_ALGORITHM_MEAN = 0,
  MRG_ALGORITHM_WEIGHTED = 1,
  MRG_ALGORITHM_TIES = 2,
  MRG_ALGORITHM_KNOTS = 3,
} MrgAlgorithm;

// Opaque adapter handle.
typedef struct MrgAdapter MrgAdapter;

typedef struct MrgWeightStats {
  double frobenius;
  double sigma_max;
  size_t parameters;
} MrgWeightStats;

typedef struct MrgMergeOptions {
  enum MrgAlgorithm algorithm;
  // TIES/KnOTS keep-rate in (0, 1].
  double density;
  double lambda;
  // Weighted only.
  double tau;
} MrgMergeOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Reads a `.mrga` file into a new handle stored in `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum MrgStatus mrg_adapter_load(const char *path, struct MrgAdapter **out);

// # Safety
// `adapter` must be a live handle and `path` a NUL-terminated string.
enum MrgStatus mrg_adapter_save(const struct MrgAdapter *adapter, const char *path);

// Releases a handle. Null is ignored.
//
// # Safety
// `adapter` must come from this library and not be used afterwards.
void mrg_adapter_free(struct MrgAdapter *adapter);

// Update id; valid while the handle lives. Null for a null handle.
//
// # Safety
// `adapter` must be null or a live handle.
const char *mrg_adapter_id(const struct MrgAdapter *adapter);

// # Safety
// `adapter` must be null or a live handle.
const char *mrg_adapter_task_id(const struct MrgAdapter *adapter);

// Frobenius norm and top singular value, averaged over parameters.
//
// # Safety
// `adapter` must be a live handle and `out` writable.
enum MrgStatus mrg_weight_stats(const struct MrgAdapter *adapter, struct MrgWeightStats *out);

// Merges `count` handles into a new handle stored in `*out`.
//
// `accuracies` holds one base accuracy per input (aligned with `inputs`)
// and is required for `MRG_ALGORITHM_WEIGHTED`; it may be null otherwise.
//
// # Safety
// `inputs` must point to `count` live handles, `options` and `out` must be
// valid, and `accuracies`, when non-null, must hold `count` values.
enum MrgStatus mrg_merge(const struct MrgAdapter *const *inputs,
                         size_t count,
                         const struct MrgMergeOptions *options,
                         const double *accuracies,
                         struct MrgAdapter **out);

// `softmax((1 − accᵢ)/τ)` written to `out_weights[0..count]`.
//
// # Safety
// `accuracies` and `out_weights` must each hold `count` values.
enum MrgStatus mrg_inverse_accuracy_weights(const double *accuracies,
                                            size_t count,
                                            double tau,
                                            double *out_weights);

// Expected number of targets at each score `k/N` under a binomial with
// success rate `p`; writes `trials + 1` values.
//
// # Safety
// `out_expected` must hold `trials + 1` values.
enum MrgStatus mrg_binomial_expected(size_t trials,
                                     double p,
                                     size_t pool_size,
                                     double *out_expected);

// Message of the last call on this thread; empty after a success.
// Valid until the next call into this library on the same thread.
const char *mrg_last_error_message(void);

const char *mrg_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MERGEABILITY_H */
