#ifndef BLINDCS_H
#define BLINDCS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum BcsStatus {
  BCS_STATUS_OK = 0,
  BCS_STATUS_NULL_POINTER = 1,
  BCS_STATUS_INVALID_ARGUMENT = 2,
  BCS_STATUS_DIMENSION_MISMATCH = 3,
  BCS_STATUS_IO = 4,
  BCS_STATUS_NUMERICAL = 5,
  BCS_STATUS_PANIC = 6,
} BcsStatus;

// A growing collection of per-signal measurements of length-`n` signals.
typedef struct BcsMeasurementSet BcsMeasurementSet;

// A learned dictionary together with the codes of its training signals.
typedef struct BcsModel BcsModel;

// Learner settings. Start from `bcs_learner_config_default()`.
typedef struct BcsLearnerConfig {
  // Largest block size.
  size_t k_max;
  // Number of atoms.
  size_t r;
  size_t max_outer_iters;
  double objective_rel_tol;
  double sac_threshold;
  // Agglomerate every this many iterations; 0 disables it.
  size_t sac_every;
  size_t restarts;
  // Initialize atoms from back-projected measurements instead of noise.
  bool data_init;
  uint64_t seed;
} BcsLearnerConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on the calling thread. The pointer
// stays valid until the next failing call on that thread.
const char *bcs_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *bcs_version(void);

struct BcsLearnerConfig bcs_learner_config_default(void);

// Creates an empty set for signals of length `n`.
//
// # Safety
// `out` must be a valid pointer to writable storage.
enum BcsStatus bcs_measurements_new(size_t n, struct BcsMeasurementSet **out);

// # Safety
// `set` must be null or a handle from `bcs_measurements_new` not yet freed.
void bcs_measurements_free(struct BcsMeasurementSet *set);

// # Safety
// `set` and `out` must be valid pointers.
enum BcsStatus bcs_measurements_len(const struct BcsMeasurementSet *set, size_t *out);

// Adds a signal observed at `m` coordinates: `values[j]` is entry
// `indices[j]` of the signal.
//
// # Safety
// `indices` and `values` must each point to `m` readable elements.
enum BcsStatus bcs_measurements_push_pixels(struct BcsMeasurementSet *set,
                                            const size_t *indices,
                                            const double *values,
                                            size_t m);

// Fills `rows` (column-major, `m × n`) with the Gaussian sensor that
// `bcs_measurements_push_gaussian` builds from the same `seed`.
//
// # Safety
// `rows` must point to `m * n` writable doubles.
enum BcsStatus bcs_gaussian_sensor(size_t m, size_t n, uint64_t seed, double *rows);

// Adds `y = A x` where `A` is the `m × n` Gaussian sensor drawn from `seed`.
//
// # Safety
// `y` must point to `m` readable doubles.
enum BcsStatus bcs_measurements_push_gaussian(struct BcsMeasurementSet *set,
                                              uint64_t seed,
                                              const double *y,
                                              size_t m);

// Learns a block dictionary from the measurements.
//
// # Safety
// `set`, `config` and `out` must be valid pointers.
enum BcsStatus bcs_learn(const struct BcsMeasurementSet *set,
                         const struct BcsLearnerConfig *config,
                         struct BcsModel **out);

// Continues learning from `start`, which must have one code per
// measurement. `start` is left untouched.
//
// # Safety
// `set`, `start`, `config` and `out` must be valid pointers.
enum BcsStatus bcs_learn_resume(const struct BcsMeasurementSet *set,
                                const struct BcsModel *start,
                                const struct BcsLearnerConfig *config,
                                struct BcsModel **out);

// # Safety
// `model` must be null or a handle not yet freed.
void bcs_model_free(struct BcsModel *model);

// Signal length.
//
// # Safety
// `model` must be a valid handle.
size_t bcs_model_n(const struct BcsModel *model);

// # Safety
// `model` must be a valid handle.
size_t bcs_model_num_blocks(const struct BcsModel *model);

// # Safety
// `model` must be a valid handle.
size_t bcs_model_num_atoms(const struct BcsModel *model);

// Number of training signals the model holds codes for.
//
// # Safety
// `model` must be a valid handle.
size_t bcs_model_num_signals(const struct BcsModel *model);

// Final training objective; NaN for a model read from disk.
//
// # Safety
// `model` must be a valid handle.
double bcs_model_objective(const struct BcsModel *model);

// # Safety
// `model` and `out` must be valid pointers.
enum BcsStatus bcs_model_block_size(const struct BcsModel *model, size_t block, size_t *out);

// Atom indices of `block`, `block_size` of them.
//
// # Safety
// `out` must point to `bcs_model_block_size(block)` writable elements.
enum BcsStatus bcs_model_block_atoms(const struct BcsModel *model, size_t block, size_t *out);

// Copies the `n × r` atom matrix, column-major.
//
// # Safety
// `out` must point to `n * r` writable doubles.
enum BcsStatus bcs_model_atoms(const struct BcsModel *model, double *out);

// Block of every training signal; `SIZE_MAX` for signals no block could fit.
//
// # Safety
// `out` must point to `bcs_model_num_signals` writable elements.
enum BcsStatus bcs_model_assignment(const struct BcsModel *model, size_t *out);

// Reconstruction `D s` of training signal `signal`.
//
// # Safety
// `out` must point to `n` writable doubles.
enum BcsStatus bcs_model_reconstruct(const struct BcsModel *model, size_t signal, double *out);

// Fits a new signal observed at `m` coordinates to its best block and
// writes the full length-`n` estimate to `out`. `block` (optional) receives
// the chosen block.
//
// # Safety
// `indices` and `values` must hold `m` elements; `out` must hold `n`.
enum BcsStatus bcs_model_fit_pixels(const struct BcsModel *model,
                                    const size_t *indices,
                                    const double *values,
                                    size_t m,
                                    double *out,
                                    size_t *block);

// Objective of the model's dictionary and codes on `set`.
//
// # Safety
// All pointers must be valid.
enum BcsStatus bcs_model_evaluate(const struct BcsModel *model,
                                  const struct BcsMeasurementSet *set,
                                  double *out);

// Writes `dictionary.bin`, `dictionary.json` and `codes.csv` into `dir`,
// the layout `blindcs learn --resume` reads.
//
// # Safety
// `model` must be valid and `dir` a NUL-terminated UTF-8 path.
enum BcsStatus bcs_model_save(const struct BcsModel *model, const char *dir);

// Reads a model written by `bcs_model_save` or `blindcs learn`.
//
// # Safety
// `dir` must be a NUL-terminated UTF-8 path and `out` valid.
enum BcsStatus bcs_model_load(const char *dir, struct BcsModel **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BLINDCS_H */
