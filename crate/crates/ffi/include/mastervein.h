#ifndef MASTERVEIN_H
#define MASTERVEIN_H

#include <stddef.h>
#include <stdint.h>

// Length of a CNN embedding.
#define MV_EMBED_DIM 64

// Result code of every fallible call.
typedef enum MvStatus {
  MV_STATUS_OK = 0,
  MV_STATUS_NULL_POINTER = 1,
  MV_STATUS_INVALID_ARGUMENT = 2,
  MV_STATUS_IO = 3,
  MV_STATUS_FORMAT = 4,
  MV_STATUS_DIMENSION_MISMATCH = 5,
  MV_STATUS_NON_FINITE = 6,
  MV_STATUS_RUNTIME = 7,
  MV_STATUS_PANIC = 8,
} MvStatus;

// A trained embedding CNN with its class head.
typedef struct MvCnn MvCnn;

// A latent-to-image decoder network.
typedef struct MvDecoder MvDecoder;

// A grayscale image with intensities in [0, 1].
typedef struct MvImage MvImage;

// A binary vein pattern.
typedef struct MvPattern MvPattern;

// Settings for `mv_pgd_attack`. Fill with `mv_attack_params_default`.
typedef struct MvAttackParams {
  double epsilon;
  double alpha;
  uint32_t iterations;
  uint32_t kernel_size;
  float kernel_sigma;
  // Number of target labels; 0 means use `target_fraction`.
  uint32_t target_count;
  double target_fraction;
  // Nonzero picks random targets instead of the top predictions.
  uint8_t random_targets;
  uint64_t seed;
} MvAttackParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL-terminated,
// truncated to `len`) and returns the full message length in bytes.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t mv_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *mv_version(void);

// # Safety
// `pixels` must hold `width * height` floats; `out` must be writable.
enum MvStatus mv_image_new(size_t width, size_t height, const float *pixels, struct MvImage **out);

// Loads a PGM or PNG file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MvStatus mv_image_load(const char *path, struct MvImage **out);

// # Safety
// `image` must be a live handle; `width` and `height` must be writable.
enum MvStatus mv_image_size(const struct MvImage *image, size_t *width, size_t *height);

// Copies the pixels row-major into `out`, which must hold exactly
// `width * height` floats.
//
// # Safety
// `out` must point to `len` writable floats.
enum MvStatus mv_image_pixels(const struct MvImage *image, float *out, size_t len);

// # Safety
// `image` must be null or a handle not yet freed.
void mv_image_free(struct MvImage *image);

// Renders a procedural vein image from a latent vector.
//
// # Safety
// `z` must hold `len` doubles; `out` must be writable.
enum MvStatus mv_procedural_vein(const double *z,
                                 size_t len,
                                 size_t width,
                                 size_t height,
                                 struct MvImage **out);

// Maximum-curvature vein extraction.
//
// # Safety
// `mask` must be null or hold `width * height` bytes; `out` must be writable.
enum MvStatus mv_pattern_extract(const struct MvImage *image,
                                 const uint8_t *mask,
                                 float sigma,
                                 struct MvPattern **out);

// Number of vein pixels in the pattern.
//
// # Safety
// `pattern` must be a live handle; `count` must be writable.
enum MvStatus mv_pattern_count(const struct MvPattern *pattern, size_t *count);

// # Safety
// `pattern` must be null or a handle not yet freed.
void mv_pattern_free(struct MvPattern *pattern);

// Miura match score in [0, 0.5] with search margins `cw` and `ch`.
//
// # Safety
// Both patterns must be live handles; `score` must be writable.
enum MvStatus mv_miura_match(const struct MvPattern *probe,
                             const struct MvPattern *template_,
                             size_t cw,
                             size_t ch,
                             double *score);

// Loads CNN weights from a VFW1 file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MvStatus mv_cnn_load(const char *path, struct MvCnn **out);

// # Safety
// `cnn` must be a live handle; `count` must be writable.
enum MvStatus mv_cnn_num_classes(const struct MvCnn *cnn, size_t *count);

// Writes the image's embedding (`MV_EMBED_DIM` floats) into `out`.
//
// # Safety
// `out` must point to `len` writable floats.
enum MvStatus mv_cnn_embed(const struct MvCnn *cnn,
                           const struct MvImage *image,
                           float *out,
                           size_t len);

// Writes one probability per class into `out`.
//
// # Safety
// `out` must point to `len` writable doubles.
enum MvStatus mv_cnn_class_probs(const struct MvCnn *cnn,
                                 const struct MvImage *image,
                                 double *out,
                                 size_t len);

// # Safety
// `cnn` must be null or a handle not yet freed.
void mv_cnn_free(struct MvCnn *cnn);

// Fills `params` with the library defaults (top 5% targets, epsilon 16/255).
//
// # Safety
// `params` must be writable.
enum MvStatus mv_attack_params_default(struct MvAttackParams *params);

// Masked, Gaussian-filtered multi-label PGD against `cnn`.
//
// # Safety
// `mask` must be null or hold `width * height` bytes; `params` must be
// readable; `out` must be writable.
enum MvStatus mv_pgd_attack(const struct MvCnn *cnn,
                            const struct MvImage *image,
                            const uint8_t *mask,
                            const struct MvAttackParams *params,
                            struct MvImage **out);

// Loads decoder weights from a VFW1 file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MvStatus mv_decoder_load(const char *path, struct MvDecoder **out);

// # Safety
// `decoder` must be a live handle; `dim` must be writable.
enum MvStatus mv_decoder_latent_dim(const struct MvDecoder *decoder, size_t *dim);

// Decodes a latent vector into an image at the decoder's native size.
//
// # Safety
// `z` must hold `len` floats; `out` must be writable.
enum MvStatus mv_decoder_decode(const struct MvDecoder *decoder,
                                const float *z,
                                size_t len,
                                struct MvImage **out);

// # Safety
// `decoder` must be null or a handle not yet freed.
void mv_decoder_free(struct MvDecoder *decoder);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MASTERVEIN_H */
