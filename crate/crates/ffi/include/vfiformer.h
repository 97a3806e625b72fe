#ifndef VFIFORMER_H
#define VFIFORMER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Zero is success.
typedef enum VfiStatus {
  VFI_OK = 0,
  VFI_ERR_NULL_POINTER = 1,
  VFI_ERR_DIMENSION = 2,
  VFI_ERR_USAGE = 3,
  VFI_ERR_CONFIG = 4,
  VFI_ERR_GEOMETRY = 5,
  VFI_ERR_INPUT = 6,
  VFI_ERR_FORMAT = 7,
  VFI_ERR_NUMERIC = 8,
  VFI_ERR_IO = 9,
  VFI_ERR_PANIC = 10,
} VfiStatus;

// A model and its weights. Create with [`vfi_model_load`] or
// [`vfi_model_new`], release with [`vfi_model_free`].
typedef struct VfiModel VfiModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Static version string.
const char *vfi_version(void);

// Message of the last failed call on this thread, or null. Valid until
// the next call on the same thread.
const char *vfi_last_error_message(void);

// Loads a checkpoint written by training.
enum VfiStatus vfi_model_load(const char *path, struct VfiModel **out);

// A freshly initialized (untrained) model of a named preset, `"toy"` or
// `"paper"`.
enum VfiStatus vfi_model_new(const char *preset, uint64_t seed, struct VfiModel **out);

// Releases a model. Null is ignored.
void vfi_model_free(struct VfiModel *model);

// Number of scalar parameters.
enum VfiStatus vfi_model_param_count(const struct VfiModel *model, size_t *out);

// Writes the middle frame between `frame0` and `frame1` into `out`
// (all `3 * height * width` floats).
enum VfiStatus vfi_interpolate(const struct VfiModel *model,
                               const float *frame0,
                               const float *frame1,
                               size_t height,
                               size_t width,
                               float *out);

// PSNR in dB between two frames of `len` floats (capped at 99).
enum VfiStatus vfi_psnr(const float *a, const float *b, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VFIFORMER_H */
