#ifndef TIMESBERT_H
#define TIMESBERT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define TB_OK 0

#define TB_ERR_NULL_ARGUMENT -1

#define TB_ERR_IO -2

#define TB_ERR_BAD_SHAPE -3

#define TB_ERR_NUMERIC -4

#define TB_ERR_PANIC -5

/**
 * Opaque handle wrapping a loaded checkpoint.
 */
typedef struct TbModel TbModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent error on this thread. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *tb_last_error(void);

/**
 * Loads a checkpoint from `path` into a new model handle stored in `out`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
int32_t tb_model_load(const char *path, struct TbModel **out);

/**
 * Releases a handle returned by `tb_model_load`. Null is a no-op.
 *
 * # Safety
 * `model` must be a pointer previously returned by `tb_model_load` that has
 * not yet been freed.
 */
void tb_model_free(struct TbModel *model);

/**
 * Model embedding width (D).
 *
 * # Safety
 * `model` must be a live handle.
 */
int32_t tb_model_d_model(const struct TbModel *model);

/**
 * Patch length (P) the model was trained with.
 *
 * # Safety
 * `model` must be a live handle.
 */
int32_t tb_model_patch_len(const struct TbModel *model);

/**
 * Forecasts `horizon` future points per variate from a row-major
 * `n_variates x n_points` history. `out` receives `n_variates * horizon`
 * values, row-major.
 *
 * # Safety
 * `model` must be a live handle; `values` must point to
 * `n_variates * n_points` doubles and `out` to `n_variates * horizon`.
 */
int32_t tb_forecast(const struct TbModel *model,
                    const double *values,
                    uintptr_t n_variates,
                    uintptr_t n_points,
                    uintptr_t horizon,
                    double *out);

/**
 * Reconstruction-error anomaly scores, one per time point, over
 * non-overlapping windows of `window_len` points. `out` receives
 * `n_points` values.
 *
 * # Safety
 * `model` must be a live handle; `values` must point to
 * `n_variates * n_points` doubles and `out` to `n_points`.
 */
int32_t tb_anomaly_scores(const struct TbModel *model,
                          const double *values,
                          uintptr_t n_variates,
                          uintptr_t n_points,
                          uintptr_t window_len,
                          double *out);

/**
 * Sample-level embedding of one series: the domain-token representation
 * (`which` = 0), or the mean over all its tokens (`which` = 1). `out`
 * receives `d_model` values.
 *
 * # Safety
 * `model` must be a live handle; `values` must point to
 * `n_variates * n_points` doubles and `out` to `d_model`.
 */
int32_t tb_embed(const struct TbModel *model,
                 const double *values,
                 uintptr_t n_variates,
                 uintptr_t n_points,
                 int32_t which,
                 double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* TIMESBERT_H */
