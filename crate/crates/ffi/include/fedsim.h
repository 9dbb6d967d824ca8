#ifndef FEDSIM_H
#define FEDSIM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum FedsimStatus {
  FEDSIM_STATUS_OK = 0,
  FEDSIM_STATUS_NULL_POINTER = 1,
  FEDSIM_STATUS_INVALID_ARGUMENT = 2,
  FEDSIM_STATUS_CONFIG = 3,
  FEDSIM_STATUS_IO = 4,
  FEDSIM_STATUS_DEFENSE = 5,
  /**
   * The experiment has not been run yet.
   */
  FEDSIM_STATUS_NOT_RUN = 6,
  /**
   * A Rust panic was caught at the boundary.
   */
  FEDSIM_STATUS_PANIC = 7,
} FedsimStatus;

/**
 * Aggregation rule selector for [`fedsim_aggregate`].
 */
typedef enum FedsimAggregator {
  FEDSIM_AGGREGATOR_MEAN = 0,
  FEDSIM_AGGREGATOR_TRIMMED_MEAN = 1,
  FEDSIM_AGGREGATOR_MEDIAN = 2,
  FEDSIM_AGGREGATOR_KRUM = 3,
  FEDSIM_AGGREGATOR_MULTI_KRUM = 4,
  FEDSIM_AGGREGATOR_LOSS_CLUSTER = 5,
} FedsimAggregator;

/**
 * Opaque experiment handle.
 */
typedef struct FedsimExperiment FedsimExperiment;

/**
 * Parameters for [`fedsim_aggregate`]. Fields that do not apply to the
 * chosen rule are ignored.
 */
typedef struct FedsimAggParams {
  /**
   * Trimmed fraction per side for the trimmed mean, in `[0, 0.5)`.
   */
  double beta;
  /**
   * Assumed number of malicious clients for Krum and Multi-Krum.
   */
  size_t f;
  /**
   * Multi-Krum selection size; 0 means `N - f - 2`.
   */
  size_t k;
  /**
   * Loss clustering: keep this many lowest losses; 0 runs 2-means.
   */
  size_t k_t_override;
  /**
   * Loss clustering: non-zero stops 2-means after the first assignment.
   */
  uint8_t single_pass;
} FedsimAggParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null if the last
 * call succeeded. The pointer stays valid until the next call into the
 * library from the same thread.
 */
const char *fedsim_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fedsim_version(void);

/**
 * Parses and validates an experiment config given as TOML text. Relative
 * dataset paths are resolved against the current directory.
 *
 * # Safety
 * `toml` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum FedsimStatus fedsim_experiment_from_toml(const char *toml, struct FedsimExperiment **out);

/**
 * Replaces the master seed and discards any previous results.
 *
 * # Safety
 * `exp` must be a handle from [`fedsim_experiment_from_toml`].
 */
enum FedsimStatus fedsim_experiment_set_seed(struct FedsimExperiment *exp, uint64_t seed);

/**
 * Runs every round of the experiment.
 *
 * # Safety
 * `exp` must be a handle from [`fedsim_experiment_from_toml`].
 */
enum FedsimStatus fedsim_experiment_run(struct FedsimExperiment *exp);

/**
 * Number of completed rounds.
 *
 * # Safety
 * `exp` must be a valid handle and `out` a valid pointer.
 */
enum FedsimStatus fedsim_experiment_num_rounds(const struct FedsimExperiment *exp, size_t *out);

/**
 * Test accuracy of the global model after round `round` (zero-based).
 *
 * # Safety
 * `exp` must be a valid handle and `out` a valid pointer.
 */
enum FedsimStatus fedsim_experiment_accuracy(const struct FedsimExperiment *exp,
                                             size_t round,
                                             double *out);

/**
 * Mean test accuracy over the rounds at or after the attack start.
 * Fails with [`FedsimStatus::InvalidArgument`] if no such round ran.
 *
 * # Safety
 * `exp` must be a valid handle and `out` a valid pointer.
 */
enum FedsimStatus fedsim_experiment_post_attack_accuracy(const struct FedsimExperiment *exp,
                                                         double *out);

/**
 * Per-round results in CSV form. Release the string with
 * [`fedsim_string_free`].
 *
 * # Safety
 * `exp` must be a valid handle and `out` a valid pointer.
 */
enum FedsimStatus fedsim_experiment_results_csv(const struct FedsimExperiment *exp, char **out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and must not be used afterwards.
 */
void fedsim_string_free(char *s);

/**
 * Releases an experiment handle. Null is ignored.
 *
 * # Safety
 * `exp` must come from [`fedsim_experiment_from_toml`] and must not be
 * used afterwards.
 */
void fedsim_experiment_free(struct FedsimExperiment *exp);

/**
 * Aggregates `n` client models of dimension `d`.
 *
 * `num_samples` (length `n`) weights the mean and may be null for equal
 * weights. `losses` (length `n`) is required for loss clustering and
 * ignored otherwise. On success `out_model` (length `d`) holds the new
 * model and `out_selected` (length `n`, may be null) holds 1 for every
 * client that entered the aggregate and 0 otherwise.
 *
 * # Safety
 * Every non-null pointer must reference at least the stated number of
 * elements.
 */
enum FedsimStatus fedsim_aggregate(enum FedsimAggregator kind,
                                   const struct FedsimAggParams *params,
                                   const double *models,
                                   size_t n,
                                   size_t d,
                                   const size_t *num_samples,
                                   const double *losses,
                                   double *out_model,
                                   uint8_t *out_selected);

/**
 * Splits `n` losses into a low and a high group with 1-d 2-means.
 * `out_low` (length `n`) receives 1 for members of the low group.
 *
 * # Safety
 * `losses` and `out_low` must reference at least `n` elements.
 */
enum FedsimStatus fedsim_two_means_split(const double *losses,
                                         size_t n,
                                         uint8_t single_pass,
                                         uint8_t *out_low);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDSIM_H */
