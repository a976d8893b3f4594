#ifndef GEREC_H
#define GEREC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum GerecStatus {
  GEREC_STATUS_OK = 0,
  GEREC_STATUS_NULL_POINTER = 1,
  GEREC_STATUS_INVALID_ARGUMENT = 2,
  GEREC_STATUS_IO = 3,
  GEREC_STATUS_PARSE = 4,
  GEREC_STATUS_OUT_OF_RANGE = 5,
  GEREC_STATUS_NUMERICAL = 6,
  GEREC_STATUS_PANIC = 7,
} GerecStatus;

/**
 * A loaded model. Read-only after loading, so one handle may be shared
 * across threads.
 */
typedef struct GerecModel GerecModel;

/**
 * Message for the last failed call on this thread, or NULL. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *gerec_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gerec_version(void);

/**
 * Loads a checkpoint file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum GerecStatus gerec_model_load(const char *path, struct GerecModel **out);

/**
 * Releases a handle from [`gerec_model_load`]. NULL is ignored.
 *
 * # Safety
 * `model` must come from `gerec_model_load` and not be used afterwards.
 */
void gerec_model_free(struct GerecModel *model);

/**
 * Writes the number of users known to the model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum GerecStatus gerec_model_num_users(const struct GerecModel *model, size_t *out);

/**
 * Writes the number of items known to the model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum GerecStatus gerec_model_num_items(const struct GerecModel *model, size_t *out);

/**
 * The evaluation seed stored with the checkpoint.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum GerecStatus gerec_model_eval_seed(const struct GerecModel *model, uint64_t *out);

/**
 * Scores `count` dense item ids for one dense user id into `scores`.
 * Noise is drawn once per `(eval_seed, user)` and shared by all items, so
 * results match the evaluation protocol.
 *
 * # Safety
 * `items` and `scores` must point to `count` elements each.
 */
enum GerecStatus gerec_model_score(const struct GerecModel *model,
                                   size_t user,
                                   const size_t *items,
                                   size_t count,
                                   uint64_t eval_seed,
                                   double *scores);

/**
 * Mean over dimensions of a user's learned variance.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum GerecStatus gerec_model_user_variance(const struct GerecModel *model,
                                           size_t user,
                                           double *out);

/**
 * 1 if `rank <= k`, else 0.
 */
double gerec_hr_at_k(size_t rank, size_t k);

/**
 * `1 / log2(rank + 1)` if `rank <= k`, else 0.
 */
double gerec_ndcg_at_k(size_t rank, size_t k);

#endif  /* GEREC_H */
