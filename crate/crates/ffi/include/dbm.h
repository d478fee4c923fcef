#ifndef DBM_H
#define DBM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum DbmStatus {
  DBM_STATUS_OK = 0,
  DBM_STATUS_NULL_POINTER = 1,
  DBM_STATUS_INVALID_ARGUMENT = 2,
  DBM_STATUS_IO = 3,
  DBM_STATUS_DATA = 4,
  DBM_STATUS_NUMERICAL = 5,
  DBM_STATUS_BUFFER_TOO_SMALL = 6,
  DBM_STATUS_PANIC = 7,
} DbmStatus;

// Opaque trained model.
typedef struct DbmModelHandle DbmModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a model JSON file. On success `*out` owns a handle that must be
// released with [`dbm_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DbmStatus dbm_model_load(const char *path, struct DbmModelHandle **out);

// Releases a handle from [`dbm_model_load`]. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void dbm_model_free(struct DbmModelHandle *model);

// Feature dimension expected by the model.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum DbmStatus dbm_model_dim(const struct DbmModelHandle *model, size_t *out);

// Number of classes in the model.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum DbmStatus dbm_model_n_classes(const struct DbmModelHandle *model, size_t *out);

// Writes the label of class `class_index` into `buf`. `*needed` receives the
// size including the NUL; a short buffer yields `BUFFER_TOO_SMALL`.
//
// # Safety
// `model` must be a live handle, `buf` null or writable for `buf_len` bytes,
// and `needed` null or valid.
enum DbmStatus dbm_model_class_label(const struct DbmModelHandle *model,
                                     size_t class_index,
                                     char *buf,
                                     size_t buf_len,
                                     size_t *needed);

// Forward log-likelihood of one sequence under class `class_index`.
//
// # Safety
// `model` must be a live handle, `frames` readable for `n_frames * dim`
// doubles, and `out` valid.
enum DbmStatus dbm_model_loglik(const struct DbmModelHandle *model,
                                size_t class_index,
                                const double *frames,
                                size_t n_frames,
                                size_t dim,
                                double *out);

// Most probable class under a uniform prior. When `scores` is not null it
// receives one log-score per class, in class order.
//
// # Safety
// `model` must be a live handle, `frames` readable for `n_frames * dim`
// doubles, `out_class` valid, and `scores` null or writable for the class
// count.
enum DbmStatus dbm_model_classify(const struct DbmModelHandle *model,
                                  const double *frames,
                                  size_t n_frames,
                                  size_t dim,
                                  size_t *out_class,
                                  double *scores);

// Copies the calling thread's last error message into `buf` when it fits and
// returns the size including the NUL. Empty after a successful call.
//
// # Safety
// `buf` must be null or writable for `buf_len` bytes.
size_t dbm_last_error(char *buf, size_t buf_len);

// Runs the `dbm` command line with `argv[0..argc]` and returns its exit code.
//
// # Safety
// `argv` must hold `argc` NUL-terminated strings.
int dbm_cli_run(int argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DBM_H */
