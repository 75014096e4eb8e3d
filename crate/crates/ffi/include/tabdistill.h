#ifndef TABDISTILL_H
#define TABDISTILL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum TdStatus {
  TD_STATUS_OK = 0,
  // Bad argument value or configuration.
  TD_STATUS_USAGE = 1,
  // Unreadable or malformed input files.
  TD_STATUS_DATA = 2,
  // Non-finite values or an undefined metric.
  TD_STATUS_NUMERIC = 3,
  // A required pointer was null or a string was not UTF-8.
  TD_STATUS_INVALID_POINTER = 4,
  // The engine panicked; the handle involved should be discarded.
  TD_STATUS_INTERNAL = 5,
} TdStatus;

typedef enum TdBaseline {
  TD_BASELINE_RANDOM = 0,
  TD_BASELINE_ENTROPY_GUIDED = 1,
} TdBaseline;

typedef struct TdConfig TdConfig;

typedef struct TdDataset TdDataset;

typedef struct TdRecord TdRecord;

typedef struct TdTeacher TdTeacher;

// Final test-split metrics of a run.
typedef struct TdMetrics {
  double accuracy;
  double f1;
  // NaN when the test split has a single class.
  double auc;
  double agreement;
  double coverage;
  uint64_t queries;
  // Nonzero when the run stopped at its query budget.
  int32_t partial;
} TdMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Owned by the
// library.
const char *td_last_error(void);

// Library version as a static string.
const char *td_version(void);

// Releases a string returned by this library.
//
// # Safety
// `s` must come from this library and not be freed twice.
void td_string_free(char *s);

// Encodes, standardizes and splits `csv_path` under `schema_path`.
//
// # Safety
// String arguments must be NUL-terminated; `out` must be writable.
enum TdStatus td_dataset_prepare(const char *csv_path,
                                 const char *schema_path,
                                 uint64_t split_seed,
                                 struct TdDataset **out);

// Loads a directory written by `prepare`.
//
// # Safety
// `dir` must be NUL-terminated; `out` must be writable.
enum TdStatus td_dataset_load(const char *dir, struct TdDataset **out);

// Rows (`n_rows`) and features (`n_features`) of a dataset.
//
// # Safety
// `ds` must be a live dataset handle; outputs must be writable.
enum TdStatus td_dataset_shape(const struct TdDataset *ds, size_t *n_rows, size_t *n_features);

// # Safety
// `ds` must be null or a handle not yet freed.
void td_dataset_free(struct TdDataset *ds);

// Trains a teacher of `family` (`"nn"`, `"rf"` or `"gbdt"`) on the
// training split.
//
// # Safety
// `ds` must be live; `family` NUL-terminated; `out` writable.
enum TdStatus td_teacher_train(const struct TdDataset *ds,
                               const char *family,
                               uint64_t seed,
                               struct TdTeacher **out);

// # Safety
// `path` must be NUL-terminated; `out` writable.
enum TdStatus td_teacher_load(const char *path, struct TdTeacher **out);

// # Safety
// `t` must be live; `path` NUL-terminated.
enum TdStatus td_teacher_save(const struct TdTeacher *t, const char *path);

// Positive-class probability for each of `rows` row-major rows of `cols`
// standardized features, written to `out[0..rows]`.
//
// # Safety
// `x` must hold `rows * cols` values and `out` room for `rows`.
enum TdStatus td_teacher_predict(const struct TdTeacher *t,
                                 const double *x,
                                 size_t rows,
                                 size_t cols,
                                 double *out);

// # Safety
// `t` must be null or a handle not yet freed.
void td_teacher_free(struct TdTeacher *t);

// Default run configuration.
//
// # Safety
// `out` must be writable.
enum TdStatus td_config_default(struct TdConfig **out);

// Parses a TOML run configuration; absent fields take defaults.
//
// # Safety
// `toml` must be NUL-terminated; `out` writable.
enum TdStatus td_config_from_toml(const char *toml, struct TdConfig **out);

// Budget-matched copy of `cfg` spending exactly `budget` queries.
//
// # Safety
// `cfg` must be live; `out` writable.
enum TdStatus td_config_budget_matched(const struct TdConfig *cfg,
                                       uint64_t budget,
                                       struct TdConfig **out);

// The configuration serialized as TOML. Free with [`td_string_free`].
//
// # Safety
// `cfg` must be live; `out` writable.
enum TdStatus td_config_to_toml(const struct TdConfig *cfg, char **out);

// # Safety
// `cfg` must be null or a handle not yet freed.
void td_config_free(struct TdConfig *cfg);

// One three-phase distillation run. Writes the run directory when
// `out_dir` is non-null.
//
// # Safety
// Handles must be live; `out_dir` null or NUL-terminated; `out` writable.
enum TdStatus td_distill(const struct TdTeacher *t,
                         const struct TdDataset *ds,
                         const struct TdConfig *cfg,
                         uint64_t seed,
                         const char *out_dir,
                         struct TdRecord **out);

// One query-budgeted baseline run; `strategy` is a [`TdBaseline`] value.
//
// # Safety
// As for [`td_distill`].
enum TdStatus td_baseline(const struct TdTeacher *t,
                          const struct TdDataset *ds,
                          const struct TdConfig *cfg,
                          uint64_t seed,
                          uint32_t strategy,
                          const char *out_dir,
                          struct TdRecord **out);

// # Safety
// `rec` must be live; `out` writable.
enum TdStatus td_record_metrics(const struct TdRecord *rec, struct TdMetrics *out);

// Number of evaluation checkpoints of a run.
//
// # Safety
// `rec` must be live; `out` writable.
enum TdStatus td_record_checkpoints(const struct TdRecord *rec, size_t *out);

// Coverage/agreement correlation over the checkpoints. Writes NaN when
// either series is constant; fails with `Numeric` below the minimum
// checkpoint count.
//
// # Safety
// `rec` must be live; `out` writable.
enum TdStatus td_record_correlation(const struct TdRecord *rec, double *out);

// Checkpoint stream in the `metrics.csv` format. Free with
// [`td_string_free`].
//
// # Safety
// `rec` must be live; `out` writable.
enum TdStatus td_record_metrics_csv(const struct TdRecord *rec, char **out);

// # Safety
// `rec` must be null or a handle not yet freed.
void td_record_free(struct TdRecord *rec);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TABDISTILL_H */
