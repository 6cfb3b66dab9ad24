#ifndef EERO_H
#define EERO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define EERO_SCORE_MAX_PROB 0

#define EERO_SCORE_BREAKING_TIES 1

#define EERO_SCORE_NEG_ENTROPY 2

#define EERO_SPLIT_TRAIN 0

#define EERO_SPLIT_CALIB 1

#define EERO_SPLIT_TEST 2

/*
 Status codes; the numeric values match the `eero` CLI exit codes.
 */
typedef enum EeroStatus {
  EERO_STATUS_OK = 0,
  /*
   A panic or other internal failure.
   */
  EERO_STATUS_INTERNAL = 1,
  EERO_STATUS_INVALID_ARGUMENT = 2,
  EERO_STATUS_IO = 3,
  EERO_STATUS_INFEASIBLE = 4,
  EERO_STATUS_MISMATCH = 5,
  EERO_STATUS_RESOLUTION_TOO_COARSE = 6,
} EeroStatus;

/*
 Per-instance routing of one batch.
 */
typedef struct EeroBatchResult EeroBatchResult;

/*
 A calibrated policy with its allocation.
 */
typedef struct EeroCalibration EeroCalibration;

/*
 A loaded or generated dataset.
 */
typedef struct EeroDataset EeroDataset;

/*
 Options for [`eero_calibrate`]; start from [`eero_calibrate_options_default`].
 */
typedef struct EeroCalibrateOptions {
  /*
   Total budget for the batch, in GFlops.
   */
  double total_budget;
  /*
   Batch size; 0 uses the test split size.
   */
  size_t batch_size;
  double beta;
  /*
   One of the `EERO_SCORE_*` constants.
   */
  uint32_t score_kind;
  double jitter;
  uint64_t seed;
} EeroCalibrateOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread, or NULL. The pointer
 stays valid until the next `eero_*` call on the same thread.
 */
const char *eero_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *eero_version(void);

/*
 Loads a dataset from a manifest file or a directory containing `manifest.json`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum EeroStatus eero_dataset_load(const char *path, struct EeroDataset **out);

/*
 Generates a synthetic dataset from a JSON generator spec (`"{}"` for defaults).

 # Safety
 `spec_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum EeroStatus eero_dataset_synth(const char *spec_json, struct EeroDataset **out);

/*
 Writes a dataset as manifest plus CSVs into an existing directory.

 # Safety
 `dataset` must come from this library; `dir` must be a NUL-terminated string.
 */
enum EeroStatus eero_dataset_write(const struct EeroDataset *dataset, const char *dir);

/*
 # Safety
 `dataset` must be NULL or come from this library and not be used afterwards.
 */
void eero_dataset_free(struct EeroDataset *dataset);

/*
 # Safety
 `dataset` must come from this library.
 */
size_t eero_dataset_num_heads(const struct EeroDataset *dataset);

/*
 # Safety
 `dataset` must come from this library.
 */
size_t eero_dataset_num_classes(const struct EeroDataset *dataset);

/*
 Instances in a split (`EERO_SPLIT_*`); 0 if the split is absent.

 # Safety
 `dataset` must come from this library.
 */
size_t eero_dataset_num_instances(const struct EeroDataset *dataset, uint32_t split_code);

/*
 Copies the per-head costs into `out[0..num_heads]`.

 # Safety
 `dataset` must come from this library; `out` must hold `len` doubles.
 */
enum EeroStatus eero_dataset_head_budgets(const struct EeroDataset *dataset,
                                          double *out,
                                          size_t len);

struct EeroCalibrateOptions eero_calibrate_options_default(void);

/*
 Allocates the budget across heads and calibrates exit thresholds.

 # Safety
 `dataset` must come from this library; `options` and `out` must be valid pointers.
 */
enum EeroStatus eero_calibrate(const struct EeroDataset *dataset,
                               const struct EeroCalibrateOptions *options,
                               struct EeroCalibration **out);

/*
 Parses a policy file's JSON text.

 # Safety
 `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum EeroStatus eero_calibration_from_json(const char *json, struct EeroCalibration **out);

/*
 Serializes the calibration as JSON; release the string with [`eero_string_free`].

 # Safety
 `calibration` must come from this library and `out` be a valid pointer.
 */
enum EeroStatus eero_calibration_to_json(const struct EeroCalibration *calibration, char **out);

/*
 # Safety
 `s` must be NULL or a string returned by this library.
 */
void eero_string_free(char *s);

/*
 # Safety
 `calibration` must be NULL or come from this library and not be used afterwards.
 */
void eero_calibration_free(struct EeroCalibration *calibration);

/*
 # Safety
 `calibration` must come from this library.
 */
size_t eero_calibration_num_heads(const struct EeroCalibration *calibration);

/*
 Copies the allocated per-head rates.

 # Safety
 `calibration` must come from this library; `out` must hold `len` doubles.
 */
enum EeroStatus eero_calibration_epsilons(const struct EeroCalibration *calibration,
                                          double *out,
                                          size_t len);

/*
 Copies the per-head score thresholds; the last is `-INFINITY`.

 # Safety
 `calibration` must come from this library; `out` must hold `len` doubles.
 */
enum EeroStatus eero_calibration_thresholds(const struct EeroCalibration *calibration,
                                            double *out,
                                            size_t len);

/*
 Routes the dataset's test split through the calibrated policy.

 # Safety
 Handles must come from this library; `out` must be a valid pointer.
 */
enum EeroStatus eero_infer(const struct EeroDataset *dataset,
                           const struct EeroCalibration *calibration,
                           struct EeroBatchResult **out);

/*
 # Safety
 `result` must be NULL or come from this library and not be used afterwards.
 */
void eero_batch_result_free(struct EeroBatchResult *result);

/*
 # Safety
 `result` must come from this library.
 */
size_t eero_batch_result_num_instances(const struct EeroBatchResult *result);

/*
 Total cost of the batch in GFlops; NaN for a NULL handle.

 # Safety
 `result` must come from this library.
 */
double eero_batch_result_consumed_budget(const struct EeroBatchResult *result);

/*
 Accuracy on the labeled test split; an invalid argument without labels.

 # Safety
 `result` must come from this library and `out` be a valid pointer.
 */
enum EeroStatus eero_batch_result_accuracy(const struct EeroBatchResult *result, double *out);

/*
 Copies the 0-based exit head of each instance.

 # Safety
 `result` must come from this library; `out` must hold `len` values.
 */
enum EeroStatus eero_batch_result_exits(const struct EeroBatchResult *result,
                                        size_t *out,
                                        size_t len);

/*
 Copies the 0-based predicted class of each instance.

 # Safety
 `result` must come from this library; `out` must hold `len` values.
 */
enum EeroStatus eero_batch_result_predictions(const struct EeroBatchResult *result,
                                              size_t *out,
                                              size_t len);

/*
 Solves the budget allocation for `num_heads` heads. `prior` may be NULL
 for the inverse-cost default. Writes the rates to `epsilons_out` and
 the budget multiplier (possibly `INFINITY`) to `multiplier_out`, which
 may be NULL.

 # Safety
 Array arguments must hold `num_heads` doubles.
 */
enum EeroStatus eero_solve_allocation(const double *risks,
                                      const double *budgets,
                                      const double *prior,
                                      size_t num_heads,
                                      double beta,
                                      double mean_budget,
                                      double *epsilons_out,
                                      double *multiplier_out);

/*
 Fraction of a batch of `batch_size` the cheaper of two heads must take
 so the batch spends `total_budget`, clamped to `[0, 1]`.

 # Safety
 `out` must be a valid pointer.
 */
enum EeroStatus eero_single_head_rate(double cheap_budget,
                                      double expensive_budget,
                                      double total_budget,
                                      size_t batch_size,
                                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EERO_H */
