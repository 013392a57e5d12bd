#ifndef PIIP_H
#define PIIP_H

#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum PiipStatus {
  PIIP_STATUS_OK = 0,
  PIIP_STATUS_NULL_POINTER = 1,
  // Bad argument at the boundary: non-UTF-8 string, wrong buffer length.
  PIIP_STATUS_INVALID_ARGUMENT = 2,
  PIIP_STATUS_CONFIG = 3,
  PIIP_STATUS_SHAPE = 4,
  PIIP_STATUS_NUMERIC = 5,
  PIIP_STATUS_INTEGRITY = 6,
  PIIP_STATUS_UNSUPPORTED_VERSION = 7,
  PIIP_STATUS_IO = 8,
  PIIP_STATUS_INPUT = 9,
  PIIP_STATUS_INTERNAL = 10,
  PIIP_STATUS_PANIC = 11,
} PiipStatus;

// Opaque model handle.
typedef struct PiipModel PiipModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Builds a built-in preset with random initialization.
//
// # Safety
// `name` must be a NUL-terminated string; `out` must be writable.
enum PiipStatus piip_model_from_preset(const char *name, uint64_t seed, struct PiipModel **out);

// Builds the model described by a TOML config file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum PiipStatus piip_model_from_config_file(const char *path,
                                            uint64_t seed,
                                            struct PiipModel **out);

// Loads a checkpoint, rebuilding the model from its config snapshot.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum PiipStatus piip_model_load(const char *path, struct PiipModel **out);

// Writes a checkpoint.
//
// # Safety
// `model` must come from a `piip_model_*` constructor; `path` must be a
// NUL-terminated string.
enum PiipStatus piip_model_save(const struct PiipModel *model, const char *path);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from a `piip_model_*` constructor and not be used again.
void piip_model_free(struct PiipModel *model);

// Writes the expected image shape `[3, H, W]` to `out[0..3]`.
//
// # Safety
// `model` must be a live handle; `out` must hold 3 values.
enum PiipStatus piip_model_input_shape(const struct PiipModel *model, size_t *out);

// Number of `f32` values one forward writes.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum PiipStatus piip_model_output_len(const struct PiipModel *model, size_t *out);

// Runs one image through the model.
//
// `image` holds `3·H·W` values in the order given by
// [`piip_model_input_shape`]; `out` receives
// [`piip_model_output_len`] values: `[D_1, G, G]` for dense models,
// class logits otherwise.
//
// # Safety
// `image` and `out` must point to `image_len` and `out_len` valid floats.
enum PiipStatus piip_model_forward(const struct PiipModel *model,
                                   const float *image,
                                   size_t image_len,
                                   float *out,
                                   size_t out_len);

// Closed-form parameter and MAC totals of the model's architecture.
//
// # Safety
// `model` must be a live handle; `params` and `macs` must be writable.
enum PiipStatus piip_model_cost(const struct PiipModel *model, uint64_t *params, uint64_t *macs);

// Closed-form totals of a preset without building it.
//
// # Safety
// `name` must be a NUL-terminated string; `params` and `macs` must be writable.
enum PiipStatus piip_preset_cost(const char *name, uint64_t *params, uint64_t *macs);

// Copies the calling thread's last error message into `buf` (truncated,
// always NUL-terminated when `cap > 0`) and returns its full length
// including the terminator. A call that succeeds clears the message.
//
// # Safety
// `buf` must hold `cap` bytes, or be null with `cap == 0`.
size_t piip_last_error_message(char *buf, size_t cap);

// Library version as a static NUL-terminated string.
const char *piip_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PIIP_H */
