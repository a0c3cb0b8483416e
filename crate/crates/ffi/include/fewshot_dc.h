#ifndef FEWSHOT_DC_H
#define FEWSHOT_DC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every call.
 */
typedef enum FsdcStatus {
  FSDC_STATUS_OK = 0,
  FSDC_STATUS_NULL_POINTER = 1,
  FSDC_STATUS_INVALID_INPUT = 2,
  FSDC_STATUS_INDEX_OUT_OF_RANGE = 3,
  FSDC_STATUS_CONFIG = 4,
  FSDC_STATUS_PARSE = 5,
  FSDC_STATUS_INTEGRITY = 6,
  FSDC_STATUS_INCOMPATIBLE = 7,
  FSDC_STATUS_UNDEFINED_RATE = 8,
  FSDC_STATUS_IO = 9,
  FSDC_STATUS_PANIC = 10,
} FsdcStatus;

/**
 * Which classes count toward a missing rate.
 */
typedef enum FsdcScope {
  /**
   * Novel classes only.
   */
  FSDC_SCOPE_FSOD = 0,
  /**
   * Base and novel classes.
   */
  FSDC_SCOPE_GFSOD = 1,
} FsdcScope;

/**
 * Opaque set of images, annotations and categories.
 */
typedef struct FsdcAnnotationSet FsdcAnnotationSet;

/**
 * Opaque linear ROI classifier.
 */
typedef struct FsdcClassifier FsdcClassifier;

/**
 * Opaque few-shot split resolved against an annotation set.
 */
typedef struct FsdcSplit FsdcSplit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *fsdc_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *fsdc_version(void);

/**
 * Numerically stable softmax of `x[0..len]` into `out[0..len]`.
 *
 * # Safety
 * `x` and `out` must point to `len` valid doubles.
 */
enum FsdcStatus fsdc_softmax(const double *x, size_t len, double *out);

/**
 * Softmax cross-entropy of `x` against `target`.
 *
 * # Safety
 * `x` must point to `len` doubles and `out` to one.
 */
enum FsdcStatus fsdc_cross_entropy(const double *x, size_t len, size_t target, double *out);

/**
 * Positive-head loss; `target` must be a foreground class.
 *
 * # Safety
 * `x` must point to `len` doubles and `out` to one.
 */
enum FsdcStatus fsdc_positive_head_loss(const double *x, size_t len, size_t target, double *out);

/**
 * Gradient of the positive-head loss with respect to the logits.
 *
 * # Safety
 * `x` and `grad` must point to `len` doubles.
 */
enum FsdcStatus fsdc_positive_head_grad(const double *x, size_t len, size_t target, double *grad);

/**
 * Negative-head loss under a 0/1 label mask whose last entry is 1.
 *
 * # Safety
 * `x` and `mask` must point to `len` elements and `out` to one double.
 */
enum FsdcStatus fsdc_negative_head_loss(const double *x,
                                        const uint8_t *mask,
                                        size_t len,
                                        double *out);

/**
 * Gradient of the negative-head loss with respect to the logits.
 *
 * # Safety
 * `x`, `mask` and `grad` must point to `len` elements.
 */
enum FsdcStatus fsdc_negative_head_grad(const double *x,
                                        const uint8_t *mask,
                                        size_t len,
                                        double *grad);

/**
 * Decoupled loss of one image: `n` ROIs with row-major logits of `width`
 * columns, integer labels and the image mask.
 *
 * # Safety
 * `logits` must point to `n * width` doubles, `labels` to `n` entries,
 * `mask` to `width` bytes and `out` to one double.
 */
enum FsdcStatus fsdc_dc_loss_image(const double *logits,
                                   size_t n,
                                   size_t width,
                                   const size_t *labels,
                                   const uint8_t *mask,
                                   double *out);

/**
 * IoU of two `[x1, y1, x2, y2]` boxes.
 *
 * # Safety
 * `a` and `b` must each point to 4 doubles and `out` to one.
 */
enum FsdcStatus fsdc_iou(const double *a, const double *b, double *out);

/**
 * Parses a COCO-style annotation file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid handle slot.
 */
enum FsdcStatus fsdc_annotations_load(const char *path, struct FsdcAnnotationSet **out);

/**
 * Parses COCO-style annotations from an in-memory JSON string.
 *
 * # Safety
 * `json` must be a nul-terminated string and `out` a valid handle slot.
 */
enum FsdcStatus fsdc_annotations_parse(const char *json, struct FsdcAnnotationSet **out);

/**
 * Image, annotation and category counts.
 *
 * # Safety
 * `set` must be a live handle; the out pointers may be null.
 */
enum FsdcStatus fsdc_annotations_counts(const struct FsdcAnnotationSet *set,
                                        size_t *images,
                                        size_t *annotations,
                                        size_t *categories);

/**
 * Releases an annotation set; null is ignored.
 *
 * # Safety
 * `set` must come from this library and not be used afterwards.
 */
void fsdc_annotations_free(struct FsdcAnnotationSet *set);

/**
 * Parses a canonical split (`{"shots": K, "per_category": {...}}`) against `set`.
 *
 * # Safety
 * `set` must be a live handle, `json` nul-terminated, `out` a valid slot.
 */
enum FsdcStatus fsdc_split_parse(const struct FsdcAnnotationSet *set,
                                 const char *json,
                                 struct FsdcSplit **out);

/**
 * Releases a split; null is ignored.
 *
 * # Safety
 * `split` must come from this library and not be used afterwards.
 */
void fsdc_split_free(struct FsdcSplit *split);

/**
 * Overall missing rate of `split` on `set`. Base and novel ids must be
 * disjoint; each image is counted once.
 *
 * # Safety
 * Handles must be live; id arrays must hold the stated counts.
 */
enum FsdcStatus fsdc_missing_rate(const struct FsdcAnnotationSet *set,
                                  const struct FsdcSplit *split,
                                  enum FsdcScope scope,
                                  const uint64_t *base_ids,
                                  size_t n_base,
                                  const uint64_t *novel_ids,
                                  size_t n_novel,
                                  bool include_crowd,
                                  double *out);

/**
 * Classifier for `num_fg_classes + 1` outputs over `dim` features with
 * seeded Gaussian weights and zero biases.
 *
 * # Safety
 * `out` must be a valid handle slot.
 */
enum FsdcStatus fsdc_classifier_new(size_t dim,
                                    size_t num_fg_classes,
                                    uint64_t seed,
                                    struct FsdcClassifier **out);

/**
 * Logits of one feature vector; `out` receives `num_fg_classes + 1` values.
 *
 * # Safety
 * `clf` must be live, `feature` must hold `dim` doubles and `out` the output count.
 */
enum FsdcStatus fsdc_classifier_logits(const struct FsdcClassifier *clf,
                                       const double *feature,
                                       size_t dim,
                                       double *out,
                                       size_t out_len);

/**
 * Shape of a classifier.
 *
 * # Safety
 * `clf` must be live; out pointers may be null.
 */
enum FsdcStatus fsdc_classifier_shape(const struct FsdcClassifier *clf,
                                      size_t *num_outputs,
                                      size_t *dim);

/**
 * Releases a classifier; null is ignored.
 *
 * # Safety
 * `clf` must come from this library and not be used afterwards.
 */
void fsdc_classifier_free(struct FsdcClassifier *clf);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEWSHOT_DC_H */
