#ifndef PYRAPOOL_H
#define PYRAPOOL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum PpStatus {
  PP_STATUS_OK = 0,
  PP_STATUS_NULL_POINTER = 1,
  PP_STATUS_INVALID_ARGUMENT = 2,
  PP_STATUS_IO = 3,
  PP_STATUS_CORRUPT_CHECKPOINT = 4,
  PP_STATUS_CHECKPOINT_MISMATCH = 5,
  PP_STATUS_PARSE = 6,
  PP_STATUS_NON_FINITE = 7,
  PP_STATUS_SHAPE = 8,
  PP_STATUS_BUFFER_TOO_SMALL = 9,
  PP_STATUS_PANIC = 10,
  PP_STATUS_OTHER = 11,
} PpStatus;

// Network spec plus its parameters.
typedef struct PpNetwork PpNetwork;

// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
typedef struct PpRect {
  int64_t x0;
  int64_t y0;
  int64_t x1;
  int64_t y1;
} PpRect;

typedef struct PpDetection {
  size_t image_id;
  size_t class_id;
  double score;
  struct PpRect rect;
} PpDetection;

// Inclusive feature-map cell rectangle.
typedef struct PpFeatureRect {
  size_t fx0;
  size_t fy0;
  size_t fx1;
  size_t fy1;
} PpFeatureRect;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL-terminated,
// truncated to `len`). Returns the buffer size the full message needs.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t pp_last_error_message(char *buf, size_t len);

// Builds a built-in network (`"toy"` or `"zf5"`) with Gaussian-initialised weights.
//
// # Safety
// `name` must be a NUL-terminated string and `out` a valid pointer.
enum PpStatus pp_network_create(const char *name,
                                size_t classes,
                                double init_std,
                                uint64_t seed,
                                struct PpNetwork **out);

// Builds a built-in network and fills it from a checkpoint file.
//
// # Safety
// `name` and `path` must be NUL-terminated strings and `out` a valid pointer.
enum PpStatus pp_network_load(const char *name,
                              size_t classes,
                              const char *path,
                              struct PpNetwork **out);

// Writes the parameters to a checkpoint file atomically.
//
// # Safety
// `net` must come from this library and `path` be a NUL-terminated string.
enum PpStatus pp_network_save(const struct PpNetwork *net, const char *path);

// Releases a handle. Null is ignored.
//
// # Safety
// `net` must be null or a handle not yet freed.
void pp_network_free(struct PpNetwork *net);

// Length of the pooled vector fed to the first fc layer; 0 for a null handle.
//
// # Safety
// `net` must be null or a live handle.
size_t pp_network_pooled_len(const struct PpNetwork *net);

// Number of network outputs; 0 for a null handle.
//
// # Safety
// `net` must be null or a live handle.
size_t pp_network_num_outputs(const struct PpNetwork *net);

// Cumulative stride of the pooled feature map.
//
// # Safety
// `net` must be a live handle and `out` a valid pointer.
enum PpStatus pp_network_stride(const struct PpNetwork *net, size_t *out);

// Class probabilities for one planar image at its own size.
//
// # Safety
// `pixels` must hold `width * height * channels` floats and `probs` `probs_len`.
enum PpStatus pp_network_classify(const struct PpNetwork *net,
                                  const float *pixels,
                                  size_t width,
                                  size_t height,
                                  size_t channels,
                                  float mean,
                                  float *probs,
                                  size_t probs_len);

// Pooled full-image representation of an image resized to short side `scale`.
//
// # Safety
// `pixels` must hold `width * height * channels` floats and `out` `out_len`.
enum PpStatus pp_network_representation(const struct PpNetwork *net,
                                        const float *pixels,
                                        size_t width,
                                        size_t height,
                                        size_t channels,
                                        size_t scale,
                                        bool l2_normalize,
                                        float mean,
                                        float *out,
                                        size_t out_len);

// Pyramid output length for `channels` feature channels.
//
// # Safety
// `levels` must hold `n_levels` values and `out` be a valid pointer.
enum PpStatus pp_spp_output_len(const size_t *levels,
                                size_t n_levels,
                                size_t channels,
                                size_t *out);

// Spatial pyramid max pooling of one `channels x height x width` map.
// Output order is level, bin (row-major), channel.
//
// # Safety
// `featmap` must hold `channels * height * width` floats and `out` `out_len`.
enum PpStatus pp_spp_forward(const float *featmap,
                             size_t channels,
                             size_t height,
                             size_t width,
                             const size_t *levels,
                             size_t n_levels,
                             float *out,
                             size_t out_len);

// Intersection over union; 0 when either rectangle is empty.
double pp_iou(struct PpRect a, struct PpRect b);

// Greedy non-maximum suppression. Survivors are written in descending score
// order and their count stored in `kept`.
//
// # Safety
// `dets` must hold `n` records, `out` `out_cap` records, `kept` be valid.
enum PpStatus pp_nms(const struct PpDetection *dets,
                     size_t n,
                     double threshold,
                     struct PpDetection *out,
                     size_t out_cap,
                     size_t *kept);

// Projects an image window onto a `map_w x map_h` feature map of stride `stride`.
//
// # Safety
// `out` must be a valid pointer.
enum PpStatus pp_map_window(struct PpRect rect,
                            size_t stride,
                            size_t map_w,
                            size_t map_h,
                            struct PpFeatureRect *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PYRAPOOL_H */
