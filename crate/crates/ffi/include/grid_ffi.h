#ifndef GRID_FFI_H
#define GRID_FFI_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GridInitMode {
  GRID_INIT_MODE_FREE = 0,
  GRID_INIT_MODE_EXPANSION = 1,
  GRID_INIT_MODE_INTERPOLATION = 2,
  GRID_INIT_MODE_RESTORATION = 3,
} GridInitMode;

typedef enum GridStatus {
  GRID_STATUS_OK = 0,
  GRID_STATUS_NULL_POINTER = 1,
  /**
   * Invalid configuration or arguments.
   */
  GRID_STATUS_CONFIG = 2,
  /**
   * Bad input data, shapes, or files.
   */
  GRID_STATUS_DATA = 3,
  GRID_STATUS_NUMERICAL = 4,
  GRID_STATUS_PANIC = 5,
} GridStatus;

/**
 * Opaque model handle.
 */
typedef struct GridModel GridModel;

typedef struct GridLayout {
  size_t rows;
  size_t cols;
  size_t frame_h;
  size_t frame_w;
  size_t channels;
} GridLayout;

typedef struct GridModelConfig {
  size_t patch_size;
  size_t embed_dim;
  size_t depth;
  size_t heads;
  size_t time_embed_dim;
  size_t frame_h;
  size_t frame_w;
  size_t channels;
} GridModelConfig;

typedef struct GridSamplerConfig {
  double noise_level;
  size_t steps;
  double guidance_scale;
  /**
   * Reference cells follow the noised forward path instead of staying clean.
   */
  bool trajectory_consistent;
  uint64_t seed;
  bool allow_degenerate;
} GridSamplerConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *grid_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *grid_version(void);

/**
 * Packs `n_frames` frames into a grid buffer of `rows*frame_h * cols*frame_w * channels` values.
 *
 * # Safety
 * `frames` must hold `frames_len` readable doubles and `out` `out_len` writable doubles.
 */
enum GridStatus grid_pack(const double *frames,
                          size_t frames_len,
                          size_t n_frames,
                          struct GridLayout layout,
                          double *out,
                          size_t out_len);

/**
 * Inverse of [`grid_pack`]: writes `rows*cols` frames in sequence order.
 *
 * # Safety
 * `grid` must hold `grid_len` readable doubles and `out` `out_len` writable doubles.
 */
enum GridStatus grid_unpack(const double *grid,
                            size_t grid_len,
                            struct GridLayout layout,
                            double *out,
                            size_t out_len);

/**
 * Mean squared error between predicted and target velocity grids.
 *
 * # Safety
 * `pred` and `target` must each hold `len` readable doubles; `out` must be writable.
 */
enum GridStatus grid_base_loss(const double *pred,
                               const double *target,
                               size_t len,
                               struct GridLayout layout,
                               double *out);

/**
 * Directional temporal loss between predicted and target velocity grids.
 *
 * # Safety
 * `pred` and `target` must each hold `len` readable doubles; `out` must be writable.
 */
enum GridStatus grid_flow_loss(const double *pred,
                               const double *target,
                               size_t len,
                               struct GridLayout layout,
                               double *out);

/**
 * Flow-loss weight at `step` for a linear ramp; negative steps are rejected.
 *
 * # Safety
 * `out` must be writable.
 */
enum GridStatus grid_alpha_at(int64_t step,
                              double alpha_max,
                              uint64_t ramp_start,
                              uint64_t ramp_end,
                              double *out);

/**
 * PSNR in dB over `n_frames` frames; identical inputs give +infinity.
 *
 * # Safety
 * `a` and `b` must each hold `len` readable doubles; `out` must be writable.
 */
enum GridStatus grid_psnr(const double *a,
                          const double *b,
                          size_t len,
                          size_t n_frames,
                          size_t frame_h,
                          size_t frame_w,
                          size_t channels,
                          double *out);

/**
 * Mean SSIM over `n_frames` frames.
 *
 * # Safety
 * `a` and `b` must each hold `len` readable doubles; `out` must be writable.
 */
enum GridStatus grid_ssim(const double *a,
                          const double *b,
                          size_t len,
                          size_t n_frames,
                          size_t frame_h,
                          size_t frame_w,
                          size_t channels,
                          double *out);

/**
 * Creates a freshly initialized model.
 *
 * # Safety
 * `config` must point to a valid config and `out` be writable.
 */
enum GridStatus grid_model_init(const struct GridModelConfig *config,
                                uint64_t seed,
                                struct GridModel **out);

/**
 * Loads a model from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum GridStatus grid_model_load(const char *path, struct GridModel **out);

/**
 * Saves the model weights (without training state).
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum GridStatus grid_model_save(const struct GridModel *model, const char *path);

/**
 * Number of scalar parameters; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
size_t grid_model_param_count(const struct GridModel *model);

/**
 * Releases a model handle; null is ignored.
 *
 * # Safety
 * `model` must be null or come from this library, and not be used afterwards.
 */
void grid_model_free(struct GridModel *model);

/**
 * Runs the sampler. `refs` holds `n_refs` frames: none for free generation,
 * one for expansion, `rows` or `rows + 1` key frames for interpolation, and
 * `rows*cols` degraded frames for restoration. `labels` are label ids.
 * `out` receives the sampled grid.
 *
 * # Safety
 * All pointers must reference buffers of the stated lengths; `model` must
 * come from this library.
 */
enum GridStatus grid_sample(const struct GridModel *model,
                            struct GridLayout layout,
                            enum GridInitMode mode,
                            const double *refs,
                            size_t refs_len,
                            size_t n_refs,
                            const uint32_t *labels,
                            size_t n_labels,
                            const struct GridSamplerConfig *config,
                            double *out,
                            size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRID_FFI_H */
