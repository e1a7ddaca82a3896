#ifndef SPLITGP_H
#define SPLITGP_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every call.
 */
typedef enum SgpStatus {
  SGP_STATUS_OK = 0,
  SGP_STATUS_NULL_POINTER = 1,
  SGP_STATUS_INVALID_ARGUMENT = 2,
  SGP_STATUS_SHAPE = 3,
  SGP_STATUS_CONFIG = 4,
  SGP_STATUS_NUMERICAL = 5,
  SGP_STATUS_REGIME = 6,
  SGP_STATUS_INSUFFICIENT_SAMPLES = 7,
  SGP_STATUS_MISSING_FILES = 8,
  SGP_STATUS_IO = 9,
  SGP_STATUS_JSON = 10,
  SGP_STATUS_STAGE = 11,
  SGP_STATUS_UTF8 = 12,
  SGP_STATUS_PANIC = 13,
} SgpStatus;

typedef enum SgpThresholdKind {
  SGP_THRESHOLD_KIND_ALWAYS = 0,
  SGP_THRESHOLD_KIND_NEVER = 1,
  SGP_THRESHOLD_KIND_AT_MOST = 2,
  SGP_THRESHOLD_KIND_AT_LEAST = 3,
} SgpThresholdKind;

/**
 * A sequential network.
 */
typedef struct SgpModel SgpModel;

/**
 * A completed experiment run.
 */
typedef struct SgpRun SgpRun;

/**
 * Latency operating point; sizes in parameters, rates per unit time.
 */
typedef struct SgpLatencyParams {
  double client_rate;
  double server_rate;
  double uplink_rate;
  double input_dim;
  double cut_dim;
  /**
   * Offloaded fraction weighting the uplink and server terms.
   */
  double beta;
  double phi_size;
  double head_size;
  double theta_size;
  double samples;
  double budget;
} SgpLatencyParams;

/**
 * A rate threshold verdict; `value` is meaningful for the bounded kinds.
 */
typedef struct SgpThreshold {
  enum SgpThresholdKind kind;
  double value;
} SgpThreshold;

/**
 * Constants of the convergence bound; `sigmas` holds one entry per client.
 */
typedef struct SgpBoundConstants {
  double smoothness;
  double grad_bound;
  const double *sigmas;
  size_t num_sigmas;
  double c;
  double eta0;
  double initial_objective;
  double optimum;
} SgpBoundConstants;

/**
 * Outcome of entropy-thresholded routing.
 */
typedef struct SgpRouting {
  size_t prediction;
  /**
   * True when the client exit answered.
   */
  bool client_exit;
  double entropy;
} SgpRouting;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a
 * success. Valid until the next call on the same thread.
 */
const char *sgp_last_error(void);

/**
 * Writes the full-at-client, full-at-server and split inference times.
 *
 * # Safety
 * `params` must point to a valid struct; the outputs must be writable.
 */
enum SgpStatus sgp_latency_times(const struct SgpLatencyParams *params,
                                 double *tau_client_full,
                                 double *tau_server_full,
                                 double *tau_splitgp);

/**
 * Client compute rates at which the split deployment is no slower than the
 * full model at the client.
 *
 * # Safety
 * `params` must point to a valid struct; `out` must be writable.
 */
enum SgpStatus sgp_client_rate_threshold(const struct SgpLatencyParams *params,
                                         struct SgpThreshold *out);

/**
 * Uplink rates at which the split deployment is no slower than the full
 * model at the server. `exact` selects the direct rearrangement; zero
 * evaluates the closed form.
 *
 * # Safety
 * `params` must point to a valid struct; `out` must be writable.
 */
enum SgpStatus sgp_uplink_rate_threshold(const struct SgpLatencyParams *params,
                                         bool exact,
                                         struct SgpThreshold *out);

/**
 * Largest client-segment size meeting the budget, or a negative value when
 * no size at least `phi_min` does.
 *
 * # Safety
 * `params` must point to a valid struct; `upper` must be writable.
 */
enum SgpStatus sgp_feasible_phi_upper(const struct SgpLatencyParams *params,
                                      double phi_min,
                                      double *upper);

/**
 * Step size `eta0 / (a + round)` with `a = (c + 4) / (1 - lambda^2)`.
 *
 * # Safety
 * `out` must be writable.
 */
enum SgpStatus sgp_lr_schedule(size_t round, double eta0, double c, double lambda, double *out);

/**
 * Personalization penalty of the convergence bound.
 *
 * # Safety
 * `out` must be writable.
 */
enum SgpStatus sgp_epsilon(double lambda,
                           double c,
                           double grad_bound,
                           double smoothness,
                           double *out);

/**
 * Right-hand side of the convergence bound after `rounds` rounds.
 *
 * # Safety
 * `constants` must be valid and its `sigmas` must hold `num_sigmas`
 * values; `out` must be writable.
 */
enum SgpStatus sgp_bound_rhs(size_t rounds,
                             const struct SgpBoundConstants *constants,
                             double lambda,
                             double *out);

/**
 * Parses a model from its JSON checkpoint.
 *
 * # Safety
 * `json` must be a nul-terminated string; `out` must be writable.
 */
enum SgpStatus sgp_model_from_json(const char *json, struct SgpModel **out);

/**
 * Extracts one segment of one client from a federation checkpoint:
 * `segment` 0 is the client segment, 1 the auxiliary head and 2 the server
 * segment that client uses.
 *
 * # Safety
 * `json` must be a nul-terminated string; `out` must be writable.
 */
enum SgpStatus sgp_checkpoint_segment(const char *json,
                                      size_t client,
                                      uint32_t segment,
                                      struct SgpModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void sgp_model_free(struct SgpModel *model);

/**
 * Writes the input and output widths of a model.
 *
 * # Safety
 * `model` must be a live handle; the outputs must be writable.
 */
enum SgpStatus sgp_model_dims(const struct SgpModel *model, size_t *input_dim, size_t *output_dim);

/**
 * Forward pass; `output_len` must equal the model's output width.
 *
 * # Safety
 * `model` must be a live handle; `input` must hold `input_len` values and
 * `output` must have room for `output_len`.
 */
enum SgpStatus sgp_model_forward(const struct SgpModel *model,
                                 const double *input,
                                 size_t input_len,
                                 double *output,
                                 size_t output_len);

/**
 * Predicts at the client exit when its entropy is at most `threshold`,
 * otherwise with the server segment.
 *
 * # Safety
 * The three models must be live handles; `input` must hold `input_len`
 * values and `out` must be writable.
 */
enum SgpStatus sgp_route_and_predict(const struct SgpModel *phi,
                                     const struct SgpModel *head,
                                     const struct SgpModel *theta,
                                     const double *input,
                                     size_t input_len,
                                     double threshold,
                                     struct SgpRouting *out);

/**
 * Runs every stage of the experiment described by `config_json` and writes
 * its artifacts to `out_dir`, or to the config's directory when null.
 *
 * # Safety
 * `config_json` and a non-null `out_dir` must be nul-terminated strings;
 * `out` must be writable.
 */
enum SgpStatus sgp_run_experiment(const char *config_json,
                                  const char *out_dir,
                                  struct SgpRun **out);

/**
 * The run manifest as JSON; owned by the handle.
 *
 * # Safety
 * `run` must be a live handle.
 */
const char *sgp_run_manifest(const struct SgpRun *run);

/**
 * Reads a summary file (`summary.json`, `eval.csv`, ...) of the run into
 * a new string released with [`sgp_string_free`].
 *
 * # Safety
 * `run` must be a live handle, `name` a nul-terminated string and `out`
 * writable.
 */
enum SgpStatus sgp_run_read_file(const struct SgpRun *run, const char *name, char **out);

/**
 * Releases a run handle; the files on disk are kept. Null is ignored.
 *
 * # Safety
 * `run` must come from this library and not be used afterwards.
 */
void sgp_run_free(struct SgpRun *run);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void sgp_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPLITGP_H */
