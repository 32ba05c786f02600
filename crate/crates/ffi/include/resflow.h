#ifndef RESFLOW_H
#define RESFLOW_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum ResflowStatus {
  RESFLOW_STATUS_OK = 0,
  // A required pointer argument was null.
  RESFLOW_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  RESFLOW_STATUS_INVALID_UTF8 = 2,
  // Layer, head, position, threshold, target or point out of range or malformed.
  RESFLOW_STATUS_INVALID_ARGUMENT = 3,
  // The model could not be located or its files are unreadable or inconsistent.
  RESFLOW_STATUS_MODEL_LOAD = 4,
  // Empty input, an unknown token id, or a sequence longer than the context.
  RESFLOW_STATUS_INVALID_INPUT = 5,
  // The output buffer is smaller than the result; the needed length was reported.
  RESFLOW_STATUS_BUFFER_TOO_SMALL = 6,
  // Internal failure, including a caught panic.
  RESFLOW_STATUS_INTERNAL = 7,
} ResflowStatus;

// Loaded model parameters and vocabulary.
typedef struct ResflowModel ResflowModel;

// Capture of one forward pass. Keeps its model alive.
typedef struct ResflowRun ResflowRun;

// Shape of a loaded model.
typedef struct ResflowModelInfo {
  size_t n_layer;
  size_t n_head;
  size_t d_model;
  size_t d_ff;
  size_t n_vocab;
  size_t n_ctx;
} ResflowModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *resflow_version(void);

// Message of the last failing call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *resflow_last_error(void);

// Loads a model from a directory or hub-cache reference.
//
// # Safety
// `reference` must be a NUL-terminated string and `out` a valid pointer.
enum ResflowStatus resflow_model_open(const char *reference, struct ResflowModel **out);

// Releases a model handle. Runs created from it stay valid.
//
// # Safety
// `model` must come from [`resflow_model_open`] and not be freed twice.
void resflow_model_free(struct ResflowModel *model);

// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum ResflowStatus resflow_model_info(const struct ResflowModel *model,
                                      struct ResflowModelInfo *out);

// Forward passes run against this model so far; 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uint64_t resflow_model_forward_passes(const struct ResflowModel *model);

// Tokenizes `text` and runs one instrumented forward pass.
//
// # Safety
// `model` must be a live handle, `text` NUL-terminated, `out` valid.
enum ResflowStatus resflow_run_text(const struct ResflowModel *model,
                                    const char *text,
                                    struct ResflowRun **out);

// Runs one instrumented forward pass over explicit token ids.
//
// # Safety
// `model` must be a live handle, `tokens` must point to `len` ids, `out` valid.
enum ResflowStatus resflow_run_tokens(const struct ResflowModel *model,
                                      const uint32_t *tokens,
                                      size_t len,
                                      struct ResflowRun **out);

// # Safety
// `run` must come from a `resflow_run_*` call and not be freed twice.
void resflow_run_free(struct ResflowRun *run);

// Number of tokens in the run; 0 for a null handle.
//
// # Safety
// `run` must be null or a live handle.
size_t resflow_run_seq_len(const struct ResflowRun *run);

// Token ids of the run.
//
// # Safety
// `run` must be a live handle; `out` must hold `capacity` ids.
enum ResflowStatus resflow_run_token_ids(const struct ResflowRun *run,
                                         uint32_t *out,
                                         size_t capacity,
                                         size_t *out_len);

// Importance of every head of `layer` for the update at `position`
// (`n_head` values).
//
// # Safety
// `run` must be a live handle; `out` must hold `capacity` values.
enum ResflowStatus resflow_head_importances(const struct ResflowRun *run,
                                            size_t layer,
                                            size_t position,
                                            double *out,
                                            size_t capacity,
                                            size_t *out_len);

// Row-major `[T, T]` attention pattern of one head.
//
// # Safety
// `run` must be a live handle; `out` must hold `capacity` values.
enum ResflowStatus resflow_attention_map(const struct ResflowRun *run,
                                         size_t layer,
                                         size_t head,
                                         double *out,
                                         size_t capacity,
                                         size_t *out_len);

// Row-major `[T, T]` contribution map of one head: row `i` holds the
// per-source scores of the update at position `i`.
//
// # Safety
// `run` must be a live handle; `out` must hold `capacity` values.
enum ResflowStatus resflow_contribution_map(const struct ResflowRun *run,
                                            size_t layer,
                                            size_t head,
                                            double *out,
                                            size_t capacity,
                                            size_t *out_len);

// The `k` highest-scoring FFN neurons at `(layer, position)`, best first.
// `neurons` and `scores` must each hold `capacity` elements.
//
// # Safety
// `run` must be a live handle; both buffers must hold `capacity` values.
enum ResflowStatus resflow_top_neurons(const struct ResflowRun *run,
                                       size_t layer,
                                       size_t position,
                                       size_t k,
                                       uint32_t *neurons,
                                       double *scores,
                                       size_t capacity,
                                       size_t *out_len);

// Information-flow graph document. `targets` is `last`, `all` or a comma
// separated position list.
//
// # Safety
// `run` must be a live handle, `targets` NUL-terminated, `out` valid.
enum ResflowStatus resflow_graph_json(const struct ResflowRun *run,
                                      double threshold,
                                      const char *targets,
                                      char **out);

// Logit-lens document for the residual state at `point` (`embed`, `mid` or
// `post`) of `layer`.
//
// # Safety
// `run` must be a live handle, `point` NUL-terminated, `out` valid.
enum ResflowStatus resflow_lens_json(const struct ResflowRun *run,
                                     size_t layer,
                                     const char *point,
                                     size_t position,
                                     size_t k,
                                     bool apply_ln,
                                     char **out);

// Vocabulary projection of one component's update, e.g. `head:1:3:7`.
//
// # Safety
// `run` must be a live handle, `component` NUL-terminated, `out` valid.
enum ResflowStatus resflow_projection_json(const struct ResflowRun *run,
                                           const char *component,
                                           size_t k,
                                           char **out);

// Releases a string returned by a `resflow_*_json` call.
//
// # Safety
// `s` must be null or come from this library, and not be freed twice.
void resflow_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RESFLOW_H */
