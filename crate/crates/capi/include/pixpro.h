#ifndef PIXPRO_H
#define PIXPRO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes shared across the ABI. `Ok` is zero; everything else is
 * an error whose message is available via `pixpro_last_error`.
 */
typedef enum PixproStatus {
  PixproStatus_Ok = 0,
  PixproStatus_NullArgument = 1,
  PixproStatus_InvalidUtf8 = 2,
  PixproStatus_Io = 3,
  PixproStatus_Config = 4,
  PixproStatus_Checkpoint = 5,
  PixproStatus_Dataset = 6,
  PixproStatus_Eval = 7,
  PixproStatus_Numeric = 8,
  PixproStatus_Internal = 9,
} PixproStatus;

/**
 * Opaque handle over a loaded checkpoint.
 */
typedef struct PixproCheckpoint PixproCheckpoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message (NUL-terminated,
 * truncated to `len`) into `buf`. Returns the full message length in
 * bytes, excluding the NUL.
 *
 * # Safety
 * `buf` must point to at least `len` writable bytes (or be null, in
 * which case only the required length is returned).
 */
uintptr_t pixpro_last_error(char *buf, uintptr_t len);

/**
 * Generates a synthetic labeled dataset under `out_dir`.
 *
 * # Safety
 * `out_dir` must be a valid NUL-terminated C string.
 */
enum PixproStatus pixpro_gen_dataset(const char *out_dir,
                                     uintptr_t n_images,
                                     uintptr_t size,
                                     uintptr_t n_classes,
                                     uint64_t seed);

/**
 * Runs (or resumes, when `resume` is nonzero) pretraining with the given
 * key-value config text, writing checkpoint and metrics into `out_dir`.
 *
 * # Safety
 * `config_text` and `out_dir` must be valid NUL-terminated C strings.
 */
enum PixproStatus pixpro_pretrain(const char *config_text, const char *out_dir, int32_t resume);

/**
 * Loads a checkpoint file into an opaque handle. The caller owns the
 * handle and must release it with `pixpro_checkpoint_free`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated C string; `out` must be a valid
 * pointer to receive the handle.
 */
enum PixproStatus pixpro_checkpoint_open(const char *path, struct PixproCheckpoint **out);

/**
 * Releases a handle created by `pixpro_checkpoint_open`. Null is a no-op.
 *
 * # Safety
 * `handle` must be null or a pointer previously returned by
 * `pixpro_checkpoint_open` that has not been freed.
 */
void pixpro_checkpoint_free(struct PixproCheckpoint *handle);

/**
 * Reads the step counter of a loaded checkpoint.
 *
 * # Safety
 * `handle` must be a live handle; `out_step` must be writable.
 */
enum PixproStatus pixpro_checkpoint_step(const struct PixproCheckpoint *handle, uint64_t *out_step);

/**
 * Linear-probe top-1 accuracy of the checkpoint's frozen features on the
 * labeled dataset at `dataset_dir`.
 *
 * # Safety
 * `handle` must be a live handle, `dataset_dir` a valid C string, and
 * `out_accuracy` writable.
 */
enum PixproStatus pixpro_linear_probe(const struct PixproCheckpoint *handle,
                                      const char *dataset_dir,
                                      uintptr_t epochs,
                                      double *out_accuracy);

/**
 * Pixel-correspondence retrieval accuracy plus its empirical chance
 * baseline.
 *
 * # Safety
 * `handle` must be a live handle, `dataset_dir` a valid C string, and
 * both out-pointers writable.
 */
enum PixproStatus pixpro_correspondence_eval(const struct PixproCheckpoint *handle,
                                             const char *dataset_dir,
                                             uintptr_t n_pairs,
                                             uint64_t seed,
                                             double *out_accuracy,
                                             double *out_chance);

/**
 * Embedding-variance collapse diagnostic. `out_collapsed` receives 1
 * when the mean normalized-embedding std falls below `threshold`.
 *
 * # Safety
 * `handle` must be a live handle, `dataset_dir` a valid C string, and
 * both out-pointers writable.
 */
enum PixproStatus pixpro_collapse_diagnostic(const struct PixproCheckpoint *handle,
                                             const char *dataset_dir,
                                             double threshold,
                                             double *out_mean_std,
                                             int32_t *out_collapsed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PIXPRO_H */
