#ifndef DBN_H
#define DBN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DbnStatus {
  DBN_STATUS_OK = 0,
  DBN_STATUS_NULL_POINTER = 1,
  DBN_STATUS_INVALID_ARGUMENT = 2,
  DBN_STATUS_SHAPE = 3,
  DBN_STATUS_FORMAT = 4,
  DBN_STATUS_IO = 5,
  DBN_STATUS_NON_FINITE = 6,
  DBN_STATUS_VALIDATION = 7,
  DBN_STATUS_PANIC = 8,
} DbnStatus;

/**
 * Images and labels, pixels scaled to [0, 1].
 */
typedef struct DbnDataset DbnDataset;

/**
 * A classifier together with the dropout rates it was trained with.
 */
typedef struct DbnModel DbnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *dbn_last_error(void);

/**
 * Loads a classifier checkpoint written by `dbn train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DbnStatus dbn_model_load(const char *path, struct DbnModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum DbnStatus dbn_model_save(const struct DbnModel *model, const char *path);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. Null is
 * ignored.
 */
void dbn_model_free(struct DbnModel *model);

/**
 * Number of pixels the model expects per image.
 *
 * # Safety
 * `model` must come from this library; `out` must be valid.
 */
enum DbnStatus dbn_model_input_size(const struct DbnModel *model, size_t *out);

/**
 * Predicted digit for each of `n_rows` images of `n_cols` pixels, stored
 * row-major in `pixels`. Writes `n_rows` labels to `labels`.
 *
 * # Safety
 * `pixels` must hold `n_rows * n_cols` doubles and `labels` room for
 * `n_rows` bytes.
 */
enum DbnStatus dbn_model_predict(const struct DbnModel *model,
                                 const double *pixels,
                                 size_t n_rows,
                                 size_t n_cols,
                                 uint8_t *labels);

/**
 * Fraction of misclassified examples in `data`.
 *
 * # Safety
 * Handles must come from this library; `error_rate` must be valid.
 */
enum DbnStatus dbn_model_evaluate(const struct DbnModel *model,
                                  const struct DbnDataset *data,
                                  double *error_rate);

/**
 * Element-wise mean of `n` models of identical shape. The result keeps the
 * dropout rates of the first model.
 *
 * # Safety
 * `models` must point to `n` model handles from this library.
 */
enum DbnStatus dbn_models_average(const struct DbnModel *const *models,
                                  size_t n,
                                  struct DbnModel **out);

/**
 * Loads MNIST-format IDX image and label files (optionally gzipped).
 *
 * # Safety
 * Paths must be NUL-terminated; `out` must be valid.
 */
enum DbnStatus dbn_dataset_load(const char *images_path,
                                const char *labels_path,
                                struct DbnDataset **out);

/**
 * # Safety
 * `data` must come from this library; `out` must be valid.
 */
enum DbnStatus dbn_dataset_len(const struct DbnDataset *data, size_t *out);

/**
 * # Safety
 * `data` must come from this library and not be used afterwards. Null is
 * ignored.
 */
void dbn_dataset_free(struct DbnDataset *data);

/**
 * Largest number of workers that can train disjoint sub-networks when
 * hidden units are dropped with probability `p`.
 *
 * # Safety
 * `out` must be valid.
 */
enum DbnStatus dbn_max_workers(double p, size_t *out);

/**
 * Fraction of weights between two hidden layers that one worker does not
 * touch at dropout probability `p`.
 *
 * # Safety
 * `out` must be valid.
 */
enum DbnStatus dbn_parameter_reduction(double p, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DBN_H */
