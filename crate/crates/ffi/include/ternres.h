#ifndef TERNRES_H
#define TERNRES_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum TrStatus {
  TR_STATUS_OK = 0,
  TR_STATUS_NULL_POINTER = 1,
  TR_STATUS_INVALID_ARGUMENT = 2,
  TR_STATUS_SHAPE_MISMATCH = 3,
  TR_STATUS_NOT_CONVERGED = 4,
  TR_STATUS_PATH_MISMATCH = 5,
  TR_STATUS_IO = 6,
  TR_STATUS_FORMAT = 7,
  TR_STATUS_UNSUPPORTED_DTYPE = 8,
  TR_STATUS_JSON = 9,
  TR_STATUS_BUFFER_TOO_SMALL = 10,
  TR_STATUS_PANIC = 11,
} TrStatus;

/**
 * One quantized weight tensor.
 */
typedef struct TrLayer TrLayer;

/**
 * A quantized network.
 */
typedef struct TrModel TrModel;

/**
 * Storage footprint of a block layout.
 */
typedef struct TrBlockStats {
  double size_bits;
  /**
   * Saturates at `UINT64_MAX`.
   */
  uint64_t capacity;
  size_t num_scaling_factors;
} TrBlockStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed status-returning call on this thread, or NULL
 * if that call succeeded.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *tr_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tr_version(void);

/**
 * Ternarizes `len` weights. Writes one sign per weight and the scale.
 *
 * # Safety
 * `w` and `signs_out` must point to `len` valid elements, `alpha_out` to one.
 */
enum TrStatus tr_ternarize(const float *w, size_t len, int8_t *signs_out, float *alpha_out);

/**
 * Converts a flat weight vector into ternary residual blocks of
 * `block_size` until the relative squared error is at most `epsilon_sq`.
 * When no block can be refined any further the layer is still returned
 * with `tr_layer_delta` above the budget.
 *
 * # Safety
 * `w` must point to `len` floats and `out_layer` to writable storage.
 */
enum TrStatus tr_layer_quantize(const float *w,
                                size_t len,
                                size_t block_size,
                                double epsilon_sq,
                                size_t max_levels,
                                struct TrLayer **out_layer);

/**
 * Achieved relative squared error, or NaN for a null handle.
 *
 * # Safety
 * `layer` must be null or a live handle.
 */
double tr_layer_delta(const struct TrLayer *layer);

/**
 * Number of weights, or 0 for a null handle.
 *
 * # Safety
 * `layer` must be null or a live handle.
 */
size_t tr_layer_len(const struct TrLayer *layer);

/**
 * Ternary levels across all blocks, or 0 for a null handle.
 *
 * # Safety
 * `layer` must be null or a live handle.
 */
size_t tr_layer_total_levels(const struct TrLayer *layer);

/**
 * Writes the dense reconstruction into `out`, which must hold exactly
 * `tr_layer_len` floats.
 *
 * # Safety
 * `layer` must be a live handle and `out` must point to `len` floats.
 */
enum TrStatus tr_layer_reconstruct(const struct TrLayer *layer, float *out, size_t len);

/**
 * # Safety
 * `layer` must be null or a handle not yet freed.
 */
void tr_layer_free(struct TrLayer *layer);

/**
 * Loads a network manifest and converts it with one uniform budget.
 * `scales_8bit` non-zero also rounds the scales to 8-bit fixed point.
 *
 * # Safety
 * `manifest_path` must be a NUL-terminated string and `out_model` writable.
 */
enum TrStatus tr_model_convert(const char *manifest_path,
                               size_t block_size,
                               double epsilon_sq,
                               size_t max_levels,
                               int32_t scales_8bit,
                               struct TrModel **out_model);

/**
 * # Safety
 * `path_in` must be a NUL-terminated string and `out_model` writable.
 */
enum TrStatus tr_model_load(const char *path_in, struct TrModel **out_model);

/**
 * # Safety
 * `model` must be a live handle and `path_out` a NUL-terminated string.
 */
enum TrStatus tr_model_save(const struct TrModel *model, const char *path_out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void tr_model_free(struct TrModel *model);

/**
 * Quantized layers in the model, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t tr_model_layer_count(const struct TrModel *model);

/**
 * Levels summed over every block of every layer, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t tr_model_total_levels(const struct TrModel *model);

/**
 * Number of blocks, which is also the smallest level count a downgrade
 * can keep. 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t tr_model_base_blocks(const struct TrModel *model);

/**
 * Total levels over base blocks, or NaN for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
double tr_model_blocks_factor(const struct TrModel *model);

/**
 * Weight count of layer `index`.
 *
 * # Safety
 * `model` must be a live handle and `out_len` writable.
 */
enum TrStatus tr_model_layer_len(const struct TrModel *model, size_t index, size_t *out_len);

/**
 * Relative squared error of layer `index`.
 *
 * # Safety
 * `model` must be a live handle and `out_delta` writable.
 */
enum TrStatus tr_model_layer_delta(const struct TrModel *model, size_t index, double *out_delta);

/**
 * Dense weights of layer `index`, flattened row-major.
 *
 * # Safety
 * `model` must be a live handle and `out` must point to `len` floats.
 */
enum TrStatus tr_model_reconstruct_layer(const struct TrModel *model,
                                         size_t index,
                                         float *out,
                                         size_t len);

/**
 * Drops the least important residual levels until `keep_levels` remain.
 * The source model is left untouched.
 *
 * # Safety
 * `model` must be a live handle and `out_model` writable.
 */
enum TrStatus tr_model_downgrade(const struct TrModel *model,
                                 size_t keep_levels,
                                 struct TrModel **out_model);

/**
 * Storage footprint of a length-`n` vector split into
 * `k` blocks where block `i` carries `residuals[i]` residual levels.
 *
 * # Safety
 * `residuals` must point to `k` values and `out_stats` must be writable.
 */
enum TrStatus tr_block_stats(size_t n,
                             const size_t *residuals,
                             size_t k,
                             struct TrBlockStats *out_stats);

/**
 * High-precision multiplications saved per weight against 8-bit weights.
 */
double tr_mult_reduction(double block_size, double blocks_factor);

/**
 * Model size reduction against 8-bit weights.
 */
double tr_size_reduction(double block_size, double blocks_factor);

double tr_power_perf_gain(double x, double compute_factor, double block_size);

/**
 * Compute-bound and bandwidth-bound throughput gains.
 *
 * # Safety
 * `pi_c` and `pi_m` must be writable.
 */
enum TrStatus tr_throughput_gains(double c,
                                  double block_size,
                                  double level_factor,
                                  double *pi_c,
                                  double *pi_m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TERNRES_H */
