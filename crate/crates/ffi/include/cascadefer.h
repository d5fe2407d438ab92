#ifndef CASCADEFER_H
#define CASCADEFER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum CfStatus {
  CF_STATUS_OK = 0,
  CF_STATUS_NULL_POINTER = 1,
  CF_STATUS_INVALID_UTF8 = 2,
  CF_STATUS_INVALID_ARGUMENT = 3,
  CF_STATUS_PARSE = 4,
  CF_STATUS_VALIDATION = 5,
  CF_STATUS_ENGINE = 6,
  CF_STATUS_BUFFER_TOO_SMALL = 7,
  CF_STATUS_PANIC = 8,
} CfStatus;

/**
 * Stream mode for [`cf_run_reference_stream`].
 */
typedef enum CfMode {
  CF_MODE_FIXED = 0,
  CF_MODE_ONLINE = 1,
} CfMode;

/**
 * Opaque fitted calibrator.
 */
typedef struct CfCalibrator CfCalibrator;

/**
 * Opaque cascade configuration.
 */
typedef struct CfConfig CfConfig;

/**
 * Opaque online threshold optimizer.
 */
typedef struct CfOptimizer CfOptimizer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent call on this thread if it failed, otherwise null.
 * The pointer stays valid until the next call on the same thread.
 */
const char *cf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cf_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void cf_string_free(char *s);

/**
 * Creates the default configuration.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum CfStatus cf_config_default(struct CfConfig **out);

/**
 * Parses and validates a TOML configuration.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CfStatus cf_config_from_toml(const char *toml, struct CfConfig **out);

/**
 * Serializes a configuration to TOML.
 *
 * # Safety
 * `config` must be a live handle and `out` a valid pointer.
 */
enum CfStatus cf_config_to_toml(const struct CfConfig *config, char **out);

/**
 * Number of model stages (the human stage excluded).
 *
 * # Safety
 * `config` must be a live handle and `out` a valid pointer.
 */
enum CfStatus cf_config_model_stages(const struct CfConfig *config, size_t *out);

/**
 * # Safety
 * `config` must be null or a live handle; it is invalid afterwards.
 */
void cf_config_free(struct CfConfig *config);

/**
 * Fits a calibrator on `len` pairs of raw confidence and correctness (0 or 1).
 *
 * # Safety
 * `raw` and `correct` must point to `len` elements; `out` must be valid.
 */
enum CfStatus cf_calibrator_fit(const double *raw,
                                const uint8_t *correct,
                                size_t len,
                                double prior_sigma,
                                struct CfCalibrator **out);

/**
 * Calibrated confidence for one raw signal.
 *
 * # Safety
 * `calibrator` must be a live handle and `out` a valid pointer.
 */
enum CfStatus cf_calibrator_apply(const struct CfCalibrator *calibrator, double raw, double *out);

/**
 * Fitted slope and intercept.
 *
 * # Safety
 * `calibrator` must be a live handle; `a` and `b` valid pointers.
 */
enum CfStatus cf_calibrator_params(const struct CfCalibrator *calibrator, double *a, double *b);

/**
 * # Safety
 * `calibrator` must be null or a live handle; it is invalid afterwards.
 */
void cf_calibrator_free(struct CfCalibrator *calibrator);

/**
 * Creates an optimizer for `config`, starting from its initial thresholds.
 *
 * # Safety
 * `config` must be a live handle and `out` a valid pointer.
 */
enum CfStatus cf_optimizer_new(const struct CfConfig *config, struct CfOptimizer **out);

/**
 * Appends one feedback record. Each array holds one entry per model stage.
 *
 * # Safety
 * `phi`, `correct` and `cost` must point to `n_stages` elements.
 */
enum CfStatus cf_optimizer_push(struct CfOptimizer *optimizer,
                                const double *phi,
                                const uint8_t *correct,
                                const double *cost,
                                size_t n_stages);

/**
 * Runs one update. `updated` is set to 1 when the thresholds moved, 0 when
 * the buffer is still too small or the step was skipped.
 *
 * # Safety
 * `optimizer` must be a live handle; `updated` a valid pointer.
 */
enum CfStatus cf_optimizer_update(struct CfOptimizer *optimizer, uint8_t *updated);

/**
 * Copies the current deferral thresholds into `taus`. `len` receives the
 * stage count; [`CfStatus::BufferTooSmall`] is returned when `capacity` is less.
 *
 * # Safety
 * `taus` must have room for `capacity` values; `len` must be valid.
 */
enum CfStatus cf_optimizer_thresholds(const struct CfOptimizer *optimizer,
                                      double *taus,
                                      size_t capacity,
                                      size_t *len);

/**
 * Optimizer state (thresholds, moments, step counters) as JSON.
 *
 * # Safety
 * `optimizer` must be a live handle and `out` a valid pointer.
 */
enum CfStatus cf_optimizer_state_json(const struct CfOptimizer *optimizer, char **out);

/**
 * # Safety
 * `optimizer` must be null or a live handle; it is invalid afterwards.
 */
void cf_optimizer_free(struct CfOptimizer *optimizer);

/**
 * Runs the built-in synthetic reference workload under `config` and returns
 * the stream report as JSON.
 *
 * # Safety
 * `config` must be a live handle and `out` a valid pointer.
 */
enum CfStatus cf_run_reference_stream(const struct CfConfig *config,
                                      uint64_t workload_seed,
                                      enum CfMode mode,
                                      char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CASCADEFER_H */
