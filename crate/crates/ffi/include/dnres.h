#ifndef DNRES_H
#define DNRES_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Call outcome. Anything but `DNR_STATUS_OK` leaves a message in
 * `dnr_last_error`.
 */
typedef enum {
  DNR_STATUS_OK = 0,
  DNR_STATUS_NULL_ARGUMENT = 1,
  DNR_STATUS_INVALID_ARGUMENT = 2,
  DNR_STATUS_IO_ERROR = 3,
  DNR_STATUS_FORMAT_ERROR = 4,
  DNR_STATUS_SHAPE_MISMATCH = 5,
  DNR_STATUS_INTERNAL_ERROR = 6,
} DnrStatus;

/**
 * Border handling for full-image inference.
 */
typedef enum {
  DNR_BORDER_REPLICATE = 0,
  DNR_BORDER_REFLECT = 1,
} DnrBorder;

/**
 * Opaque handle to a loaded network.
 */
typedef struct DnrNetwork DnrNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *dnr_version(void);

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next dnres call on the same thread.
 */
const char *dnr_last_error(void);

/**
 * Load a checkpoint from `path` into a fresh handle stored in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
DnrStatus dnr_network_load(const char *path, DnrNetwork **out);

/**
 * Release a handle. Passing null is a no-op.
 *
 * # Safety
 * `net` must be a pointer from `dnr_network_load`, freed at most once.
 */
void dnr_network_free(DnrNetwork *net);

/**
 * Copy the topology identifier (such as "dn7-ds2") into `buf`.
 *
 * # Safety
 * `buf` must hold at least `cap` writable bytes.
 */
DnrStatus dnr_network_topology_id(const DnrNetwork *net, char *buf, size_t cap);

/**
 * Number of convolution layers (residual blocks count two each).
 *
 * # Safety
 * `net` and `out` must be valid pointers.
 */
DnrStatus dnr_network_conv_layer_count(const DnrNetwork *net, uint32_t *out);

/**
 * Learnable parameter count; `with_bias` of 0 counts weights only.
 *
 * # Safety
 * `net` and `out` must be valid pointers.
 */
DnrStatus dnr_network_param_count(const DnrNetwork *net, int32_t with_bias, uint64_t *out);

/**
 * Multiply-accumulate count for one `height` x `width` inference.
 *
 * # Safety
 * `net` and `out` must be valid pointers.
 */
DnrStatus dnr_network_mac_count(const DnrNetwork *net, size_t height, size_t width, uint64_t *out);

/**
 * Denoise a `height` x `width` image; `output` receives the same extent.
 * Input and output may alias only fully (identical pointers are fine).
 *
 * # Safety
 * `input` and `output` must each point to `height * width` floats.
 */
DnrStatus dnr_network_denoise(const DnrNetwork *net,
                              const float *input,
                              size_t height,
                              size_t width,
                              DnrBorder border,
                              float *output);

/**
 * Degrade a clean image under a noise spec ("gaussian:25", "poisson:4",
 * "poisson-gaussian:SIGMA[:PEAK]"). Identical (spec, seed, input) triples
 * produce identical bytes.
 *
 * # Safety
 * `spec` must be NUL-terminated; `input`/`output` must each point to
 * `height * width` floats.
 */
DnrStatus dnr_degrade(const char *spec,
                      const float *input,
                      size_t height,
                      size_t width,
                      uint64_t seed,
                      float *output);

/**
 * Peak signal-to-noise ratio between two buffers on a `max_val` scale.
 * Identical buffers yield positive infinity.
 *
 * # Safety
 * `a` and `b` must each point to `len` floats; `out` must be valid.
 */
DnrStatus dnr_psnr(const float *a, const float *b, size_t len, double max_val, double *out);

/**
 * Mean structural similarity with the standard 11-tap Gaussian window on
 * a [0,1] scale. Requires `height` and `width` of at least 11.
 *
 * # Safety
 * `a` and `b` must each point to `height * width` floats; `out` valid.
 */
DnrStatus dnr_ssim(const float *a, const float *b, size_t height, size_t width, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DNRES_H */
