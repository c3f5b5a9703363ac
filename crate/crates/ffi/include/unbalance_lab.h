#ifndef UNBALANCE_LAB_H
#define UNBALANCE_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum UlStatus {
  UL_STATUS_OK = 0,
  UL_STATUS_NULL_POINTER = 1,
  UL_STATUS_INVALID_ARGUMENT = 2,
  UL_STATUS_SHAPE_MISMATCH = 3,
  UL_STATUS_NON_FINITE = 4,
  UL_STATUS_DEGENERATE = 5,
  UL_STATUS_MISSING_COLUMN = 6,
  UL_STATUS_IO = 7,
  UL_STATUS_PARSE = 8,
  UL_STATUS_INSUFFICIENT_DATA = 9,
  UL_STATUS_PANIC = 99,
} UlStatus;

// Opaque dataset handle.
typedef struct UlDataset UlDataset;

// Opaque trained-model handle.
typedef struct UlModel UlModel;

// Group metrics; gaps are NaN when the set carries no confounder.
typedef struct UlGroupReport {
  // 0 for class imbalance (accuracy), 1 for confounded data (AUC).
  uint32_t mode;
  double underg_metric;
  double overg_metric;
  double fpr_gap;
  double fnr_gap;
  uintptr_t n_underg;
  uintptr_t n_overg;
} UlGroupReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. The pointer stays
// valid until the next `ul_*` call on the same thread.
const char *ul_last_error(void);

// Library version as a static nul-terminated string.
const char *ul_version(void);

// Per-example loss and its derivative with respect to `p`.
// `spec_json` is a loss spec such as `{"kind":"fbi","K":4,"xi":1}`; the
// batch-level `peo` kind is rejected.
//
// # Safety
// Pointers must be valid; `spec_json` nul-terminated.
enum UlStatus ul_loss(const char *spec_json,
                      uint8_t y,
                      uint8_t d,
                      double p,
                      double *out_loss,
                      double *out_dloss_dp);

// Rank AUC with half credit for ties.
//
// # Safety
// `y` and `p` must point to `n` elements.
enum UlStatus ul_auc(const uint8_t *y, const double *p, uintptr_t n, double *out);

// Synthetic training set from a config JSON (same fields as the CLI).
//
// # Safety
// `config_json` nul-terminated; `out` valid.
enum UlStatus ul_generate_train(const char *config_json, struct UlDataset **out);

// Balanced validation set for the same config.
//
// # Safety
// As [`ul_generate_train`].
enum UlStatus ul_generate_validation(const char *config_json,
                                     uintptr_t n_val,
                                     struct UlDataset **out);

// Dataset from caller buffers. `z` may be null (class imbalance, with
// `minority` flagged as under-represented); otherwise `minority` is ignored.
//
// # Safety
// `features` holds `n_rows * n_cols` values; `y` and non-null `z` hold
// `n_rows`.
enum UlStatus ul_dataset_from_arrays(const double *features,
                                     uintptr_t n_rows,
                                     uintptr_t n_cols,
                                     const uint8_t *y,
                                     const uint8_t *z,
                                     uint8_t minority,
                                     struct UlDataset **out);

// # Safety
// `path` nul-terminated; `out` valid.
enum UlStatus ul_dataset_load_csv(const char *path, struct UlDataset **out);

// # Safety
// `ds` from this library; `path` nul-terminated.
enum UlStatus ul_dataset_save_csv(const struct UlDataset *ds, const char *path);

// Row count; 0 for a null handle.
//
// # Safety
// `ds` null or from this library.
uintptr_t ul_dataset_len(const struct UlDataset *ds);

// Feature count; 0 for a null handle.
//
// # Safety
// `ds` null or from this library.
uintptr_t ul_dataset_n_features(const struct UlDataset *ds);

// Count of rows with `d == flag`; 0 for a null handle.
//
// # Safety
// `ds` null or from this library.
uintptr_t ul_dataset_count_d(const struct UlDataset *ds, uint8_t flag);

// # Safety
// `ds` null or from this library, not yet freed.
void ul_dataset_free(struct UlDataset *ds);

// Trains a plain classifier. `config_json` is a training config, e.g.
// `{"epochs":30,"batch_size":128,"seed":1,"loss":{"kind":"h_star"}}`.
// `hidden` may be null when `n_hidden` is 0.
//
// # Safety
// Pointers valid; `hidden` holds `n_hidden` widths.
enum UlStatus ul_train(const struct UlDataset *ds,
                       const uintptr_t *hidden,
                       uintptr_t n_hidden,
                       const char *config_json,
                       struct UlModel **out);

// Lagrangian fairness training. `lfo_json` holds `lr_model`, `lr_lambda`,
// `epsilon` and optionally `lambda_init`; the final multiplier is written
// to `out_lambda` when non-null.
//
// # Safety
// As [`ul_train`].
enum UlStatus ul_train_lfo(const struct UlDataset *ds,
                           const uintptr_t *hidden,
                           uintptr_t n_hidden,
                           const char *config_json,
                           const char *lfo_json,
                           struct UlModel **out,
                           double *out_lambda);

// Adversarial BR-NN training. The last entry of `hidden` is the trunk's
// feature width; heads are single layers.
//
// # Safety
// As [`ul_train`]; `n_hidden` must be at least 1.
enum UlStatus ul_train_brnn(const struct UlDataset *ds,
                            const uintptr_t *hidden,
                            uintptr_t n_hidden,
                            double delta,
                            const char *config_json,
                            struct UlModel **out);

// Probabilities for `n_rows` rows; `out_p` receives `n_rows` values.
//
// # Safety
// `features` holds `n_rows * n_cols` values, `out_p` room for `n_rows`.
enum UlStatus ul_model_predict(const struct UlModel *model,
                               const double *features,
                               uintptr_t n_rows,
                               uintptr_t n_cols,
                               double *out_p);

// Group metrics of `model` on `ds` at `threshold`.
//
// # Safety
// Handles from this library; `out` valid.
enum UlStatus ul_evaluate(const struct UlModel *model,
                          const struct UlDataset *ds,
                          double threshold,
                          struct UlGroupReport *out);

// # Safety
// `model` from this library; `path` nul-terminated.
enum UlStatus ul_model_save(const struct UlModel *model, const char *path);

// # Safety
// `path` nul-terminated; `out` valid.
enum UlStatus ul_model_load(const char *path, struct UlModel **out);

// Input width of the model; 0 for a null handle.
//
// # Safety
// `model` null or from this library.
uintptr_t ul_model_input_width(const struct UlModel *model);

// # Safety
// `model` null or from this library, not yet freed.
void ul_model_free(struct UlModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNBALANCE_LAB_H */
