#ifndef MARKOV_ICL_H
#define MARKOV_ICL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum MicStatus {
  MIC_STATUS_OK = 0,
  MIC_STATUS_NULL_POINTER = 1,
  MIC_STATUS_INVALID_ARGUMENT = 2,
  MIC_STATUS_SHAPE_MISMATCH = 3,
  /**
   * Overflow, divergence or a matrix that is not positive definite.
   */
  MIC_STATUS_NUMERICAL = 4,
  MIC_STATUS_IO = 5,
  MIC_STATUS_PARSE = 6,
  /**
   * The target has no exact preimage; see `mic_recover_pq_len2`.
   */
  MIC_STATUS_NO_REAL_PREIMAGE = 7,
  MIC_STATUS_BUFFER_TOO_SMALL = 8,
  MIC_STATUS_PANIC = 9,
} MicStatus;

/**
 * Parameterization of a layer.
 */
typedef enum MicParamForm {
  MIC_PARAM_FORM_DENSE = 0,
  MIC_PARAM_FORM_SPARSE = 1,
  MIC_PARAM_FORM_RESTRICTED = 2,
} MicParamForm;

/**
 * Opaque stack of LSA layers.
 */
typedef struct MicModel MicModel;

/**
 * Opaque batch of prompts.
 */
typedef struct MicPromptBatch MicPromptBatch;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mic_version(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *mic_last_error(void);

/**
 * Sample `count` prompts of binary chains started from `Bern(p)` with
 * uniform kernels.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum MicStatus mic_prompt_batch_sample_binary(double p,
                                              size_t d,
                                              size_t n,
                                              size_t count,
                                              uint64_t seed,
                                              struct MicPromptBatch **out);

/**
 * Build a batch from explicit chains. `chains` holds `count` prompts, each
 * `n + 1` chains of `d + 1` states, row-major; the last chain of each prompt
 * is the query and its last state is the label.
 *
 * # Safety
 * `chains` must point to `count * (n + 1) * (d + 1)` readable values and
 * `out` to writable storage for one handle.
 */
enum MicStatus mic_prompt_batch_from_chains(const uint32_t *chains,
                                            size_t count,
                                            size_t n,
                                            size_t d,
                                            size_t states,
                                            struct MicPromptBatch **out);

/**
 * # Safety
 * `batch` must come from a `mic_prompt_batch_*` constructor and not be used
 * afterwards. Null is ignored.
 */
void mic_prompt_batch_free(struct MicPromptBatch *batch);

/**
 * Number of prompts; 0 for a null handle.
 *
 * # Safety
 * `batch` must be null or a live handle.
 */
size_t mic_prompt_batch_len(const struct MicPromptBatch *batch);

/**
 * Copy the query labels into `out`.
 *
 * # Safety
 * `batch` must be a live handle and `out` must hold `len` writable values.
 */
enum MicStatus mic_prompt_batch_labels(const struct MicPromptBatch *batch, double *out, size_t len);

/**
 * Copy prompt `index`'s `(d+1) x (n+1)` input matrix, column-major.
 *
 * # Safety
 * `batch` must be a live handle and `out` must hold `len` writable values.
 */
enum MicStatus mic_prompt_batch_embedding(const struct MicPromptBatch *batch,
                                          size_t index,
                                          double *out,
                                          size_t len);

/**
 * A model with parameters drawn uniformly from `[-scale, scale]`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum MicStatus mic_model_random(enum MicParamForm form,
                                size_t d,
                                size_t n,
                                size_t layers,
                                double scale,
                                uint64_t seed,
                                struct MicModel **out);

/**
 * # Safety
 * `model` must come from a `mic_model_*` constructor and not be used
 * afterwards. Null is ignored.
 */
void mic_model_free(struct MicModel *model);

/**
 * Number of trainable parameters; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t mic_model_num_params(const struct MicModel *model);

/**
 * Copy the flattened parameters into `out`.
 *
 * # Safety
 * `model` must be a live handle and `out` must hold `len` writable values.
 */
enum MicStatus mic_model_get_params(const struct MicModel *model, double *out, size_t len);

/**
 * Overwrite the parameters from a flattened vector of exactly
 * `mic_model_num_params` values.
 *
 * # Safety
 * `model` must be a live handle and `params` must hold `len` readable values.
 */
enum MicStatus mic_model_set_params(struct MicModel *model, const double *params, size_t len);

/**
 * Predictions for every prompt of `batch`.
 *
 * # Safety
 * `model` and `batch` must be live handles; `out` must hold `len` writable
 * values.
 */
enum MicStatus mic_model_predict(const struct MicModel *model,
                                 const struct MicPromptBatch *batch,
                                 double *out,
                                 size_t len);

/**
 * Mean squared error over `batch`.
 *
 * # Safety
 * `model` and `batch` must be live handles; `out` must be writable.
 */
enum MicStatus mic_model_loss(const struct MicModel *model,
                              const struct MicPromptBatch *batch,
                              double *out);

/**
 * Full-batch training with Adam (`adam != 0`) or plain gradient descent.
 * When `trace` is non-null it receives the loss before each of the
 * `iterations` updates.
 *
 * # Safety
 * `model` and `batch` must be live handles; `trace` must be null or hold
 * `trace_len` writable values.
 */
enum MicStatus mic_model_train(struct MicModel *model,
                               const struct MicPromptBatch *batch,
                               double learning_rate,
                               size_t iterations,
                               int32_t adam,
                               double *trace,
                               size_t trace_len);

/**
 * Write a text checkpoint.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum MicStatus mic_model_save(const struct MicModel *model, const char *path);

/**
 * Read a text checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable storage for one
 * handle.
 */
enum MicStatus mic_model_load(const char *path, struct MicModel **out);

/**
 * Largest gap, over layers and prompts, between the forward pass of a
 * restricted model and its preconditioned weight recursion.
 *
 * # Safety
 * `model` and `batch` must be live handles; `out` must be writable.
 */
enum MicStatus mic_forward_equiv_check(const struct MicModel *model,
                                       const struct MicPromptBatch *batch,
                                       double *out);

/**
 * Closed-form minimizer `(X1, X2, X3)` for length-2 chains.
 *
 * # Safety
 * `out` must hold 3 writable values.
 */
enum MicStatus mic_xstar_len2_iid(double p, size_t n, double *out);

/**
 * Exact `(b, A)` with `phi(b, A) = x` for `d = 1`. Returns
 * `NoRealPreimage` and writes the negative discriminant when none exists.
 *
 * # Safety
 * `x` must hold 3 readable values, `b` and `a` 2 writable values each and
 * `discriminant` must be null or writable.
 */
enum MicStatus mic_recover_pq_len2(const double *x, double *b, double *a, double *discriminant);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MARKOV_ICL_H */
