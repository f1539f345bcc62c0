#ifndef NSMC_H
#define NSMC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes returned by every fallible function.
 */
typedef enum NsmcStatus {
  NSMC_STATUS_OK = 0,
  NSMC_STATUS_NULL_POINTER = 1,
  NSMC_STATUS_INVALID_ARGUMENT = 2,
  NSMC_STATUS_MODEL = 3,
  NSMC_STATUS_IO = 4,
  NSMC_STATUS_ARTIFACT = 5,
  NSMC_STATUS_DEGENERATE_WEIGHTS = 6,
  NSMC_STATUS_RUNTIME = 7,
  NSMC_STATUS_PANIC = 8,
} NsmcStatus;

/**
 * Trained proposal networks for one model.
 */
typedef struct NsmcArtifact NsmcArtifact;

/**
 * A model with its inverse factorization and network plan.
 */
typedef struct NsmcModel NsmcModel;

/**
 * Training settings. Obtain defaults from [`nsmc_train_config_default`].
 */
typedef struct NsmcTrainConfig {
  size_t n_train;
  size_t n_validate;
  size_t minibatch;
  size_t max_steps_per_epoch;
  size_t n_epochs;
  double step_size;
  uint64_t seed;
} NsmcTrainConfig;

/**
 * Summary of one inference run.
 */
typedef struct NsmcInferResult {
  double log_evidence;
  double final_ess;
  size_t steps;
  size_t unique_ancestries;
} NsmcInferResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length excluding the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t nsmc_last_error(char *buf, size_t len);

/**
 * Builds a named model. `params` is null or a `;`-separated list of
 * `key=value` pairs.
 *
 * # Safety
 * `name` and `params` must be null or NUL-terminated strings; `out` must be
 * a valid pointer.
 */
enum NsmcStatus nsmc_model_new(const char *name, const char *params, struct NsmcModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`nsmc_model_new`] not yet freed.
 */
void nsmc_model_free(struct NsmcModel *model);

/**
 * Number of latent variables, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t nsmc_model_num_latents(const struct NsmcModel *model);

/**
 * Number of inverse factors, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t nsmc_model_num_factors(const struct NsmcModel *model);

/**
 * Number of distinct proposal networks, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t nsmc_model_num_networks(const struct NsmcModel *model);

/**
 * Writes the text report of the model into `buf` as with [`nsmc_last_error`]
 * and stores the full length in `written`.
 *
 * # Safety
 * `model` must be a live handle, `buf` null or `len` writable bytes,
 * `written` null or valid.
 */
enum NsmcStatus nsmc_model_describe(const struct NsmcModel *model,
                                    char *buf,
                                    size_t len,
                                    size_t *written);

/**
 * Default training settings.
 */
struct NsmcTrainConfig nsmc_train_config_default(void);

/**
 * Trains every proposal network of `model`.
 *
 * # Safety
 * `model` must be a live handle, `config` null (defaults) or valid, `out` valid.
 */
enum NsmcStatus nsmc_train(const struct NsmcModel *model,
                           const struct NsmcTrainConfig *config,
                           struct NsmcArtifact **out);

/**
 * Reads an artifact file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid.
 */
enum NsmcStatus nsmc_artifact_load(const char *path, struct NsmcArtifact **out);

/**
 * Writes an artifact file.
 *
 * # Safety
 * `artifact` must be a live handle and `path` a NUL-terminated string.
 */
enum NsmcStatus nsmc_artifact_save(const struct NsmcArtifact *artifact, const char *path);

/**
 * Releases an artifact. Null is ignored.
 *
 * # Safety
 * `artifact` must be null or a handle not yet freed.
 */
void nsmc_artifact_free(struct NsmcArtifact *artifact);

/**
 * Runs inference with `particles` particles. A null `artifact` selects the
 * prior proposal. A null `data` selects the model's default data (the pump
 * fixture, otherwise a synthetic draw seeded by `seed`). Posterior means of
 * the latents in topological order are written to `means` when it is non-null
 * and `means_len` equals [`nsmc_model_num_latents`].
 *
 * # Safety
 * Handles must be live or null as documented; `data` null or a
 * NUL-terminated string; `means` null or `means_len` writable doubles;
 * `result` valid.
 */
enum NsmcStatus nsmc_infer(const struct NsmcModel *model,
                           const struct NsmcArtifact *artifact,
                           const char *data,
                           size_t particles,
                           uint64_t seed,
                           double *means,
                           size_t means_len,
                           struct NsmcInferResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NSMC_H */
