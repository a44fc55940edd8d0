#ifndef RELGUIDE_H
#define RELGUIDE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Status codes returned by every fallible call.
 */
typedef enum RgStatus {
  RG_STATUS_OK = 0,
  RG_STATUS_USAGE = 1,
  RG_STATUS_CONFIG = 2,
  RG_STATUS_FORMAT = 3,
  RG_STATUS_IO = 4,
  RG_STATUS_DIMENSION = 5,
  RG_STATUS_NUMERICAL = 6,
  RG_STATUS_SCORE = 7,
  RG_STATUS_NULL_POINTER = 8,
  RG_STATUS_PANIC = 9,
} RgStatus;

/*
 A loaded labeled dataset.
 */
typedef struct RgDataset RgDataset;

/*
 A classifier with its architecture.
 */
typedef struct RgModel RgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. Valid until the
 next call into this library on the same thread.
 */
const char *rg_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *rg_version(void);

/*
 Freshly initialized model. `config_json` may be null for the default
 architecture.

 # Safety
 `config_json` is null or a NUL-terminated string; `out` is writable.
 */
enum RgStatus rg_model_new(const char *config_json, uint64_t seed, struct RgModel **out);

/*
 Loads weights saved for the architecture described by `config_json`
 (null for the default).

 # Safety
 String arguments are null or NUL-terminated; `out` is writable.
 */
enum RgStatus rg_model_load(const char *config_json, const char *path, struct RgModel **out);

/*
 # Safety
 `model` is a live handle; `path` is NUL-terminated.
 */
enum RgStatus rg_model_save(const struct RgModel *model, const char *path);

/*
 # Safety
 `model` is null or a handle not yet freed.
 */
void rg_model_free(struct RgModel *model);

/*
 Number of input values (C·H·W), or 0 for a null handle.

 # Safety
 `model` is null or a live handle.
 */
size_t rg_model_input_len(const struct RgModel *model);

/*
 Number of classes, or 0 for a null handle.

 # Safety
 `model` is null or a live handle.
 */
size_t rg_model_classes(const struct RgModel *model);

/*
 Inference-mode logits into `logits[0..logits_len]`.

 # Safety
 Buffers hold at least the given number of elements.
 */
enum RgStatus rg_model_forward(const struct RgModel *model,
                               const float *input,
                               size_t input_len,
                               float *logits,
                               size_t logits_len);

/*
 # Safety
 `input` holds `input_len` values; `class_out` is writable.
 */
enum RgStatus rg_model_predict(const struct RgModel *model,
                               const float *input,
                               size_t input_len,
                               size_t *class_out);

/*
 Input relevance of the `target` logit. `rule` is "epsilon", "alphabeta"
 or "composite" (null means composite). Writes C·H·W values.

 # Safety
 Buffers hold at least the given number of elements; `rule` is null or
 NUL-terminated.
 */
enum RgStatus rg_lrp(const struct RgModel *model,
                     const float *input,
                     size_t input_len,
                     size_t target,
                     const char *rule,
                     float *relevance,
                     size_t relevance_len);

/*
 Share of positive relevance on the lesion versus the rest of the object.
 `relevance` is `[channels, height, width]`; masks are `height·width`
 bytes of 0 or 1.

 # Safety
 Buffers hold the implied number of elements; `score_out` is writable.
 */
enum RgStatus rg_tumor_lrp_score(const float *relevance,
                                 size_t channels,
                                 size_t height,
                                 size_t width,
                                 const uint8_t *lesion,
                                 const uint8_t *object,
                                 bool area_normalized,
                                 float floor,
                                 float *score_out);

/*
 # Safety
 `path` is NUL-terminated; `out` is writable.
 */
enum RgStatus rg_dataset_load(const char *path, struct RgDataset **out);

/*
 # Safety
 `dataset` is null or a handle not yet freed.
 */
void rg_dataset_free(struct RgDataset *dataset);

/*
 Number of samples, or 0 for a null handle.

 # Safety
 `dataset` is null or a live handle.
 */
size_t rg_dataset_len(const struct RgDataset *dataset);

/*
 Copies sample `index`: its image (C·H·W values) and, when the pointers
 are non-null, its id and label.

 # Safety
 `image` holds `image_len` values; `id_out` and `label_out` are null or
 writable.
 */
enum RgStatus rg_dataset_sample(const struct RgDataset *dataset,
                                size_t index,
                                float *image,
                                size_t image_len,
                                uint32_t *id_out,
                                uint8_t *label_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RELGUIDE_H */
