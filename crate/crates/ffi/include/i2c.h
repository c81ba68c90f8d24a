#ifndef I2C_H
#define I2C_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Passed as `class_id` to localize the predicted class.
 */
#define I2C_PREDICTED_CLASS UINT32_MAX

typedef enum I2cStatus {
  I2C_STATUS_OK = 0,
  /**
   * Null pointer or bad buffer length.
   */
  I2C_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Configuration, input or bounds error.
   */
  I2C_STATUS_CONFIG = 2,
  /**
   * Malformed file or I/O failure.
   */
  I2C_STATUS_FORMAT = 3,
  I2C_STATUS_NUMERIC = 4,
  /**
   * A panic was caught at the boundary.
   */
  I2C_STATUS_INTERNAL = 5,
} I2cStatus;

/**
 * Opaque model handle.
 */
typedef struct I2cModel I2cModel;

/**
 * Half-open pixel box `[x1, x2) x [y1, y2)`.
 */
typedef struct I2cBox {
  uint32_t x1;
  uint32_t y1;
  uint32_t x2;
  uint32_t y2;
} I2cBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint. `input_size` is the square image side; `stride_total`
 * is the map downsampling factor the model was trained with.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum I2cStatus i2c_model_load(const char *path,
                              uint32_t input_size,
                              uint32_t stride_total,
                              struct I2cModel **out);

/**
 * # Safety
 * `model` must come from [`i2c_model_load`] and not be freed already; null
 * is ignored.
 */
void i2c_model_free(struct I2cModel *model);

/**
 * Number of classes, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t i2c_model_num_classes(const struct I2cModel *model);

/**
 * Image side length, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t i2c_model_input_size(const struct I2cModel *model);

/**
 * Class logits of one HWC image (`input_size * input_size * 3` floats).
 *
 * # Safety
 * `image` must hold `image_len` floats and `logits` `logits_len` doubles.
 */
enum I2cStatus i2c_model_predict(const struct I2cModel *model,
                                 const float *image,
                                 size_t image_len,
                                 double *logits,
                                 size_t logits_len);

/**
 * Box of `class_id` (or the top-scoring class for [`I2C_PREDICTED_CLASS`])
 * at threshold `tau`. `*found` is 0 when no pixel reaches the threshold,
 * in which case `*box_out` is zeroed. `class_out` may be null.
 *
 * # Safety
 * Buffers as in [`i2c_model_predict`]; `box_out` and `found` must be valid.
 */
enum I2cStatus i2c_model_localize(const struct I2cModel *model,
                                  const float *image,
                                  size_t image_len,
                                  uint32_t class_id,
                                  double tau,
                                  struct I2cBox *box_out,
                                  int32_t *found,
                                  uint32_t *class_out);

/**
 * Intersection over union of two non-empty boxes.
 *
 * # Safety
 * All pointers must be valid.
 */
enum I2cStatus i2c_iou(const struct I2cBox *a, const struct I2cBox *b, double *out);

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into the library on this thread.
 */
const char *i2c_last_error(void);

/**
 * Library version, a static NUL-terminated string.
 */
const char *i2c_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* I2C_H */
