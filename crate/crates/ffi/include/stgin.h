#ifndef STGIN_H
#define STGIN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  // Graph attention followed by the bidirectional GRU.
  STGIN_ARCHITECTURE_FULL = 0,
  // Graph convolution only.
  STGIN_ARCHITECTURE_SPATIAL_ONLY = 1,
  // Bidirectional GRU only.
  STGIN_ARCHITECTURE_TEMPORAL_ONLY = 2,
} StginArchitecture;

// Result code of every fallible call.
typedef enum {
  STGIN_STATUS_OK = 0,
  STGIN_STATUS_NULL_POINTER = 1,
  STGIN_STATUS_INVALID_ARGUMENT = 2,
  STGIN_STATUS_SHAPE = 3,
  STGIN_STATUS_NO_OBSERVED_DATA = 4,
  STGIN_STATUS_IO = 5,
  STGIN_STATUS_PARSE = 6,
  STGIN_STATUS_CHECKPOINT = 7,
  STGIN_STATUS_DIVERGED = 8,
  STGIN_STATUS_OTHER = 9,
  STGIN_STATUS_PANIC = 10,
} StginStatus;

typedef enum {
  STGIN_UNIT_SPEED = 0,
  STGIN_UNIT_FLOW = 1,
  STGIN_UNIT_SYNTHETIC = 2,
} StginUnit;

typedef enum {
  // Individual entries missing uniformly at random.
  STGIN_REGIME_RANDOM = 0,
  // Whole sensors missing.
  STGIN_REGIME_NONRANDOM = 1,
} StginRegime;

// A sensor matrix (with its observation mask) and its graph.
typedef struct StginDataset StginDataset;

// A trained network with its normalization.
typedef struct StginModel StginModel;

// Training and model settings; start from [`stgin_train_options_default`].
typedef struct {
  StginArchitecture architecture;
  size_t gat_width;
  size_t hidden;
  double lambda;
  double learning_rate;
  size_t max_epochs;
  size_t window_length;
  size_t patience;
  uint64_t seed;
  // `true` selects z-score normalization instead of min-max.
  bool zscore;
} StginTrainOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or null if none.
// The pointer stays valid until the next failing call on the same thread.
const char *stgin_last_error_message(void);

StginTrainOptions stgin_train_options_default(void);

// Synthetic ring dataset: `nodes` sensors, `steps` five-minute steps.
//
// # Safety
// `out` must be valid for one pointer write.
StginStatus stgin_dataset_synth(size_t nodes,
                                size_t steps,
                                uint64_t seed,
                                double noise_std,
                                StginDataset **out);

// Loads a dataset CSV (header `timestamp,<sensor ids>`; empty cells are gaps)
// and an adjacency CSV.
//
// # Safety
// Paths must be NUL-terminated; `out` must be valid for one pointer write.
StginStatus stgin_dataset_load_csv(const char *data_path,
                                   const char *graph_path,
                                   StginUnit unit,
                                   StginDataset **out);

// Number of sensors, or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live dataset handle.
size_t stgin_dataset_nodes(const StginDataset *ds);

// Number of time steps, or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live dataset handle.
size_t stgin_dataset_steps(const StginDataset *ds);

// Copies the values (0 at unobserved entries) into `values[len]`.
//
// # Safety
// `ds` must be a live handle; `values` valid for `len` writes.
StginStatus stgin_dataset_values(const StginDataset *ds, double *values, size_t len);

// Draws a held-out mask and returns a new dataset with those entries hidden.
// If `observed` is non-null it receives the resulting mask (1 = observed).
//
// # Safety
// `ds` must be a live handle; `out` valid for one pointer write;
// `observed` null or valid for `len` writes.
StginStatus stgin_dataset_mask(const StginDataset *ds,
                               StginRegime regime,
                               double rate,
                               uint64_t seed,
                               StginDataset **out,
                               uint8_t *observed,
                               size_t len);

// Trains on the observed entries of `ds`.
//
// # Safety
// `ds` and `opts` must be valid; `out` valid for one pointer write.
StginStatus stgin_model_train(const StginDataset *ds,
                              const StginTrainOptions *opts,
                              StginModel **out);

// Writes the imputed mean and variance of every entry (physical units;
// flow means clipped at zero) into `mu[len]` and `sigma2[len]`.
//
// # Safety
// Handles must be live; `mu` and `sigma2` valid for `len` writes each.
StginStatus stgin_model_impute(const StginModel *model,
                               const StginDataset *ds,
                               double *mu,
                               double *sigma2,
                               size_t len);

// # Safety
// `model` must be live; `path` NUL-terminated.
StginStatus stgin_model_save(const StginModel *model, const char *path);

// # Safety
// `path` NUL-terminated; `out` valid for one pointer write.
StginStatus stgin_model_load(const char *path, StginModel **out);

// Releases a dataset; null is ignored.
//
// # Safety
// `ds` must be null or a handle not yet freed.
void stgin_dataset_free(StginDataset *ds);

// Releases a model; null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void stgin_model_free(StginModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STGIN_H */
