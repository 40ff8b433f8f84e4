#ifndef AVATAR_H
#define AVATAR_H

/* Generated by cbindgen from avatar-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes; nonzero values mirror the CLI exit codes.
 */
typedef enum AvatarStatus {
  AVATAR_STATUS_OK = 0,
  /**
   * Internal failure (panic or invalid argument).
   */
  AVATAR_STATUS_INTERNAL = 1,
  AVATAR_STATUS_BAD_CONFIG = 2,
  AVATAR_STATUS_ASSET_ERROR = 3,
  AVATAR_STATUS_ADAPTER_ERROR = 4,
  AVATAR_STATUS_NUMERIC_ERROR = 5,
} AvatarStatus;

/**
 * Opaque loaded body model.
 */
typedef struct AvatarBodyModel AvatarBodyModel;

/**
 * Training inputs; every field is a path string.
 */
typedef struct AvatarTrainArgs {
  const char *config;
  const char *model;
  const char *image;
  const char *mask;
  const char *camera;
  const char *shape;
  const char *input_pose;
  const char *motion;
  const char *out_dir;
  /**
   * Comma-separated ablation names, or null.
   */
  const char *ablations;
  /**
   * Checkpoint to resume from, or null.
   */
  const char *resume;
  /**
   * Nonzero: run only the initialization stage.
   */
  uint8_t init_only;
} AvatarTrainArgs;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; do not free.
 */
const char *avatar_version(void);

/**
 * Message of the most recent failure on this thread, or null. The caller
 * frees it with [`avatar_string_free`].
 */
char *avatar_last_error_message(void);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `ptr` must come from this library and not be freed twice.
 */
void avatar_string_free(char *ptr);

/**
 * Load a body-model archive directory; null on failure (see
 * [`avatar_last_error_message`]).
 *
 * # Safety
 * `archive_dir` must be a valid NUL-terminated string.
 */
struct AvatarBodyModel *avatar_body_model_load(const char *archive_dir);

/**
 * # Safety
 * `handle` must come from [`avatar_body_model_load`] and not be freed twice.
 */
void avatar_body_model_free(struct AvatarBodyModel *handle);

/**
 * # Safety
 * `handle` must be a live model handle (or null, which yields 0).
 */
uint64_t avatar_body_model_vertex_count(const struct AvatarBodyModel *handle);

/**
 * # Safety
 * `handle` must be a live model handle (or null, which yields 0).
 */
uint64_t avatar_body_model_joint_count(const struct AvatarBodyModel *handle);

/**
 * Write the capsule end-to-end fixture into `out_dir`.
 *
 * # Safety
 * `out_dir` must be a valid NUL-terminated string.
 */
enum AvatarStatus avatar_fixture_generate(const char *out_dir, uint64_t seed);

/**
 * Run the two-stage optimization; outputs (checkpoints, logs, summary,
 * manifest) land in `out_dir`.
 *
 * # Safety
 * `args` and its non-null fields must be valid for reads.
 */
enum AvatarStatus avatar_train(const struct AvatarTrainArgs *args);

/**
 * Render one frame per (pose, camera) pair from a checkpoint.
 *
 * # Safety
 * All non-null pointers must be valid NUL-terminated strings; `model` may
 * be null to use the archive path recorded in the checkpoint.
 */
enum AvatarStatus avatar_render(const char *checkpoint,
                                const char *model,
                                const char *motion,
                                const char *cameras,
                                const char *out_dir,
                                size_t samples,
                                double margin);

/**
 * Evaluate rendered frames against ground truth under the subject-bbox
 * protocol; writes `metrics.csv` and `metrics.json` into `out_dir`.
 *
 * # Safety
 * All pointers must be valid NUL-terminated strings.
 */
enum AvatarStatus avatar_evaluate(const char *rendered,
                                  const char *truth,
                                  const char *masks,
                                  const char *out_dir,
                                  int64_t margin);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* AVATAR_H */
