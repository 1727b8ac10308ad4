#ifndef HIEDIT_H
#define HIEDIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes; 1-3 match the command-line exit codes.
 */
typedef enum {
  HIEDIT_OK = 0,
  /**
   * Invalid configuration, input validation or dimension mismatch.
   */
  HIEDIT_CONFIG = 1,
  /**
   * I/O failure or malformed file.
   */
  HIEDIT_IO = 2,
  /**
   * Invariant violated, including non-finite losses.
   */
  HIEDIT_INVARIANT = 3,
  /**
   * Null pointer or non-UTF-8 string argument.
   */
  HIEDIT_INVALID_ARGUMENT = 4,
  HIEDIT_PANIC = 5,
} HieditStatus;

/**
 * Pipeline configuration.
 */
typedef struct HieditConfig HieditConfig;

/**
 * An `[height, width, channels]` image of values in [0, 1].
 */
typedef struct HieditImage HieditImage;

/**
 * A loaded model checkpoint.
 */
typedef struct HieditModel HieditModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the next failing call.
 */
const char *hiedit_last_error(void);

/**
 * # Safety
 * `out_config` must be a valid pointer to writable storage.
 */
HieditStatus hiedit_config_default(HieditConfig **out_config);

/**
 * Loads a dotted-key JSON config merged over the defaults.
 *
 * # Safety
 * `config_path` must be a nul-terminated string; `out_config` must be writable.
 */
HieditStatus hiedit_config_load(const char *config_path, HieditConfig **out_config);

/**
 * Applies one `key=value` override; the config is unchanged on failure.
 *
 * # Safety
 * `config` must come from this library; `assignment` must be nul-terminated.
 */
HieditStatus hiedit_config_set(HieditConfig *config, const char *assignment);

/**
 * # Safety
 * `config` must come from this library and not be used afterwards. Null is ignored.
 */
void hiedit_config_free(HieditConfig *config);

/**
 * Generates a dataset into `out_dir` and writes the effective config beside it.
 *
 * # Safety
 * Pointers must be valid; strings nul-terminated.
 */
HieditStatus hiedit_generate_dataset(const HieditConfig *config, const char *out_dir);

/**
 * Trains from `data_dir` into `run_dir`; writes the last step reached to `out_step` when non-null.
 *
 * # Safety
 * Pointers must be valid; strings nul-terminated.
 */
HieditStatus hiedit_train(const HieditConfig *config,
                          const char *data_dir,
                          const char *run_dir,
                          uint64_t *out_step);

/**
 * # Safety
 * Pointers must be valid; strings nul-terminated.
 */
HieditStatus hiedit_model_load(const HieditConfig *config,
                               const char *checkpoint_dir,
                               HieditModel **out_model);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. Null is ignored.
 */
void hiedit_model_free(HieditModel *model);

/**
 * Copies `height * width * channels` row-major values into a new image.
 *
 * # Safety
 * `data` must point to that many readable doubles.
 */
HieditStatus hiedit_image_new(size_t height,
                              size_t width,
                              size_t channels,
                              const double *data,
                              HieditImage **out_image);

/**
 * Reads an RBT1 tensor file or a binary PPM (`.ppm`).
 *
 * # Safety
 * `image_path` must be nul-terminated; `out_image` writable.
 */
HieditStatus hiedit_image_load(const char *image_path, HieditImage **out_image);

/**
 * # Safety
 * `image` must come from this library; the out pointers must be writable.
 */
HieditStatus hiedit_image_shape(const HieditImage *image,
                                size_t *height,
                                size_t *width,
                                size_t *channels);

/**
 * Row-major pixel values owned by `image`; valid until it is freed. Null for a null image.
 *
 * # Safety
 * `image` must come from this library.
 */
const double *hiedit_image_data(const HieditImage *image);

/**
 * # Safety
 * `image` must come from this library and not be used afterwards. Null is ignored.
 */
void hiedit_image_free(HieditImage *image);

/**
 * Edits `source` under `instruction`; the sampler stream is derived from `seed`.
 *
 * # Safety
 * Pointers must be valid; `instruction` nul-terminated; `out_image` writable.
 */
HieditStatus hiedit_model_edit(const HieditModel *model,
                               const HieditImage *source,
                               const char *instruction,
                               uint64_t seed,
                               HieditImage **out_image);

/**
 * Runs the gradient audit over `seeds` seeds; the worst relative error goes to `out_worst`.
 * Returns `HIEDIT_INVARIANT` if any check exceeds the tolerance.
 *
 * # Safety
 * `out_worst` must be writable or null.
 */
HieditStatus hiedit_selftest(uint32_t seeds, double *out_worst);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HIEDIT_H */
