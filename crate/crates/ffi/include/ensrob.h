#ifndef ENSROB_H
#define ENSROB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ErStatus {
  ER_STATUS_OK = 0,
  ER_STATUS_NULL_POINTER = 1,
  ER_STATUS_INVALID_ARGUMENT = 2,
  ER_STATUS_SHAPE = 3,
  ER_STATUS_NUMERIC = 4,
  ER_STATUS_IO = 5,
  ER_STATUS_FORMAT = 6,
  ER_STATUS_CONSISTENCY = 7,
  ER_STATUS_PROTOCOL = 8,
  ER_STATUS_CONFIG = 9,
  ER_STATUS_DOMAIN = 10,
  ER_STATUS_PRECONDITION = 11,
  ER_STATUS_INTERNAL = 12,
  ER_STATUS_PANIC = 13,
} ErStatus;

typedef enum ErNorm {
  ER_NORM_L1 = 0,
  ER_NORM_L2 = 1,
  ER_NORM_LINF = 2,
} ErNorm;

typedef enum ErDropoutForm {
  ER_DROPOUT_FORM_STATED = 0,
  ER_DROPOUT_FORM_PROOF = 1,
} ErDropoutForm;

/*
 Opaque labelled dataset.
 */
typedef struct ErDataset ErDataset;

/*
 Opaque trained or initialized network.
 */
typedef struct ErModel ErModel;

typedef struct ErRobustness {
  double epsilon_bar_emp;
  double variance_alpha;
  size_t t;
} ErRobustness;

typedef struct ErBoundInputs {
  uint64_t n;
  double m;
  double delta;
  double epsilon_bar;
  uint64_t k;
  double alpha;
  double beta;
  uint64_t layers;
} ErBoundInputs;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failure on this thread, or NULL. The pointer stays
 valid until the next failing call on the same thread.
 */
const char *er_last_error_message(void);

/*
 Static name of a status code.
 */
const char *er_status_name(enum ErStatus status);

/*
 # Safety
 `dims` points to `depth` values; `out` is writable.
 */
enum ErStatus er_model_init(const size_t *dims,
                            size_t depth,
                            uint64_t seed,
                            double scale,
                            struct ErModel **out);

/*
 # Safety
 `path` is a NUL-terminated string; `out` is writable.
 */
enum ErStatus er_model_load(const char *path_c, struct ErModel **out);

/*
 Writes the binary model file (no sidecar).

 # Safety
 `model` is a live handle; `path` is a NUL-terminated string.
 */
enum ErStatus er_model_save(const struct ErModel *model, const char *path_c);

/*
 # Safety
 `model` was returned by this library and is not used afterwards.
 */
void er_model_free(struct ErModel *model);

/*
 # Safety
 `model` is a live handle or NULL (yields 0).
 */
size_t er_model_input_dim(const struct ErModel *model);

/*
 # Safety
 `model` is a live handle or NULL (yields 0).
 */
size_t er_model_num_classes(const struct ErModel *model);

/*
 Logits of one input, without dropout.

 # Safety
 `input` has `input_len` values and `logits` room for `logits_len`.
 */
enum ErStatus er_model_forward(const struct ErModel *model,
                               const double *input,
                               size_t input_len,
                               double *logits,
                               size_t logits_len);

/*
 Bounded cross-entropy of one labelled input.

 # Safety
 `input` has `input_len` values; `out` is writable.
 */
enum ErStatus er_model_loss(const struct ErModel *model,
                            const double *input,
                            size_t input_len,
                            size_t label,
                            double loss_bound,
                            double *out);

/*
 # Safety
 Both paths are NUL-terminated strings; `out` is writable.
 */
enum ErStatus er_dataset_load_idx(const char *images, const char *labels, struct ErDataset **out);

/*
 # Safety
 `out` is writable.
 */
enum ErStatus er_dataset_synthetic(size_t n,
                                   size_t dim,
                                   size_t classes,
                                   double separation,
                                   double noise,
                                   uint64_t seed,
                                   struct ErDataset **out);

/*
 # Safety
 `dataset` was returned by this library and is not used afterwards.
 */
void er_dataset_free(struct ErDataset *dataset);

/*
 # Safety
 `dataset` is a live handle or NULL (yields 0).
 */
size_t er_dataset_len(const struct ErDataset *dataset);

/*
 # Safety
 `dataset` is a live handle or NULL (yields 0).
 */
size_t er_dataset_dim(const struct ErDataset *dataset);

/*
 # Safety
 `dataset` is a live handle or NULL (yields 0).
 */
size_t er_dataset_class_count(const struct ErDataset *dataset);

/*
 Linearized adversarial perturbation `Δs` of one sample.

 # Safety
 `sample` and `delta_out` have `len` values.
 */
enum ErStatus er_adversarial_perturbation(const struct ErModel *model,
                                          const double *sample,
                                          size_t len,
                                          size_t label,
                                          enum ErNorm norm,
                                          double radius,
                                          double loss_bound,
                                          double *delta_out);

/*
 Empirical ensemble robustness of `count` models over a dataset. When
 `per_run_max` is not NULL it receives `count` per-model maxima.

 # Safety
 `models` holds `count` live handles; `per_run_max` is NULL or has room
 for `count` values; `out` is writable.
 */
enum ErStatus er_ensemble_robustness(const struct ErModel *const *models,
                                     size_t count,
                                     const struct ErDataset *dataset,
                                     enum ErNorm norm,
                                     double radius,
                                     double loss_bound,
                                     bool clamp_to_unit_box,
                                     double *per_run_max,
                                     struct ErRobustness *out);

/*
 # Safety
 `inputs` is readable and `out` writable.
 */
enum ErStatus er_bound_theorem1(const struct ErBoundInputs *inputs, double *out);

/*
 # Safety
 `inputs` is readable and `out` writable.
 */
enum ErStatus er_bound_corollary1(double adv_empirical_mean,
                                  const struct ErBoundInputs *inputs,
                                  double *out);

/*
 # Safety
 `inputs` is readable and `out` writable.
 */
enum ErStatus er_bound_theorem2(const struct ErBoundInputs *inputs, double *out);

/*
 # Safety
 `inputs` is readable and `out` writable.
 */
enum ErStatus er_bound_lemma1(const struct ErBoundInputs *inputs, double *out);

/*
 # Safety
 `inputs` is readable and `out` writable.
 */
enum ErStatus er_bound_dropout(const struct ErBoundInputs *inputs,
                               enum ErDropoutForm form,
                               double *out);

/*
 # Safety
 `xs` and `ys` have `len` values; `out` is writable.
 */
enum ErStatus er_pearson(const double *xs, const double *ys, size_t len, double *out);

/*
 # Safety
 `xs` and `ys` have `len` values; `out` is writable.
 */
enum ErStatus er_spearman(const double *xs, const double *ys, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ENSROB_H */
