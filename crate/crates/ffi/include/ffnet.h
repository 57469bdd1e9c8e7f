/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef FFNET_H
#define FFNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every fallible entry point.
typedef enum FfnetStatus {
  FFNET_STATUS_OK = 0,
  FFNET_STATUS_NULL_POINTER = 1,
  FFNET_STATUS_INVALID_ARGUMENT = 2,
  FFNET_STATUS_CONFIG = 3,
  FFNET_STATUS_GRAPH = 4,
  FFNET_STATUS_SHAPE_MISMATCH = 5,
  FFNET_STATUS_WEIGHTS = 6,
  FFNET_STATUS_NO_WEIGHTS = 7,
  FFNET_STATUS_IO = 8,
  FFNET_STATUS_PANIC = 9,
} FfnetStatus;

// Opaque model handle.
typedef struct FfnetModel FfnetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next ffnet call on this thread.
const char *ffnet_last_error(void);

// Library version as a static NUL-terminated string.
const char *ffnet_version(void);

// Builds a model from config text (`key = value` lines or `k=v` tokens).
// On success `*out` owns a handle to release with `ffnet_model_free`.
//
// # Safety
// `config` must be a NUL-terminated string; `out` must be writable.
enum FfnetStatus ffnet_model_create(const char *config, struct FfnetModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from `ffnet_model_create` and not be used afterwards.
void ffnet_model_free(struct FfnetModel *model);

// Seeded He-normal weights with identity batch norm.
//
// # Safety
// `model` must be a live handle.
enum FfnetStatus ffnet_model_init_random(struct FfnetModel *model, uint64_t seed);

// Loads an FFNW weights file. Entries the model does not use are an error
// unless `permissive` is non-zero.
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum FfnetStatus ffnet_model_load_weights(struct FfnetModel *model,
                                          const char *path,
                                          int32_t permissive);

// Writes the current weights as an FFNW file.
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum FfnetStatus ffnet_model_save_weights(const struct FfnetModel *model, const char *path);

// Folds every batch norm into its convolution. The handle keeps the folded
// graph; weights saved afterwards match the folded layout.
//
// # Safety
// `model` must be a live handle.
enum FfnetStatus ffnet_model_fold_batchnorm(struct FfnetModel *model);

// Writes `n, c, h, w` of the expected input into `dims[0..4]`.
//
// # Safety
// `model` must be a live handle and `dims` point to four writable values.
enum FfnetStatus ffnet_model_input_dims(const struct FfnetModel *model, size_t *dims);

// Writes `n, c, h, w` of the logits into `dims[0..4]`.
//
// # Safety
// `model` must be a live handle and `dims` point to four writable values.
enum FfnetStatus ffnet_model_output_dims(const struct FfnetModel *model, size_t *dims);

// Number of graph nodes; folding reduces it.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum FfnetStatus ffnet_model_num_nodes(const struct FfnetModel *model, size_t *out);

// Learnable parameter count (convolutions and batch-norm scale/shift).
//
// # Safety
// `model` must be a live handle and `out` writable.
enum FfnetStatus ffnet_model_num_params(const struct FfnetModel *model, uint64_t *out);

// Runs one forward pass. `input` holds the NCHW input (`input_len`
// floats); the NCHW logits are written to `output` (`output_len` floats).
// Both lengths must match the model's dims exactly.
//
// # Safety
// `model` must be a live handle; `input` must be readable for `input_len`
// floats and `output` writable for `output_len` floats.
enum FfnetStatus ffnet_model_run(struct FfnetModel *model,
                                 const float *input,
                                 size_t input_len,
                                 float *output,
                                 size_t output_len);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* FFNET_H */
