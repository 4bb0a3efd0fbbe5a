/* C interface for the drfx RF-fingerprint testbed. */

#ifndef DRFX_H
#define DRFX_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Dataset split selector.
 */
typedef enum {
  DRFX_SPLIT_TRAIN = 0,
  DRFX_SPLIT_VAL = 1,
  DRFX_SPLIT_TEST = 2,
} DrfxSplit;

/**
 * Status codes returned by every fallible call.
 */
typedef enum {
  DRFX_STATUS_OK = 0,
  DRFX_STATUS_NULL_ARGUMENT = 1,
  DRFX_STATUS_INVALID_CONFIG = 2,
  DRFX_STATUS_MISSING_DEPENDENCY = 3,
  DRFX_STATUS_NUMERIC_FAILURE = 4,
  DRFX_STATUS_IO_ERROR = 5,
  DRFX_STATUS_BUFFER_TOO_SMALL = 6,
} DrfxStatus;

typedef struct DrfxConfig DrfxConfig;

typedef struct DrfxDataset DrfxDataset;

typedef struct DrfxStudent DrfxStudent;

typedef struct DrfxTeacher DrfxTeacher;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread; valid until the next
 * failing call on the same thread.
 */
const char *drfx_last_error(void);

const char *drfx_version(void);

DrfxConfig *drfx_config_default(void);

/**
 * Parse and validate a config from a JSON string; null on failure (see
 * `drfx_last_error`).
 */
DrfxConfig *drfx_config_from_json(const char *json);

/**
 * Override the config's seed in place.
 */
DrfxStatus drfx_config_set_seed(DrfxConfig *cfg, uint64_t seed);

void drfx_config_free(DrfxConfig *cfg);

/**
 * Sample a fleet and build the featurized 6:2:2 dataset from the config.
 */
DrfxDataset *drfx_dataset_build(const DrfxConfig *cfg);

/**
 * Number of samples in one split; 0 when `ds` is null.
 */
uintptr_t drfx_dataset_len(const DrfxDataset *ds, DrfxSplit split);

void drfx_dataset_free(DrfxDataset *ds);

DrfxTeacher *drfx_teacher_new(const DrfxConfig *cfg);

DrfxStudent *drfx_student_new(const DrfxConfig *cfg);

void drfx_teacher_free(DrfxTeacher *t);

void drfx_student_free(DrfxStudent *s);

uintptr_t drfx_teacher_param_count(const DrfxTeacher *t);

uintptr_t drfx_student_param_count(const DrfxStudent *s);

DrfxStatus drfx_teacher_save(const DrfxTeacher *t, const DrfxConfig *cfg, const char *path);

DrfxStatus drfx_student_save(const DrfxStudent *s, const DrfxConfig *cfg, const char *path);

DrfxStatus drfx_teacher_load(DrfxTeacher *t, const DrfxConfig *cfg, const char *path);

DrfxStatus drfx_student_load(DrfxStudent *s, const DrfxConfig *cfg, const char *path);

/**
 * Supervised (no-KD) training of the teacher on the dataset's train split.
 */
DrfxStatus drfx_teacher_train(DrfxTeacher *t, const DrfxConfig *cfg, const DrfxDataset *ds);

/**
 * Supervised (no-KD) training of the student.
 */
DrfxStatus drfx_student_train(DrfxStudent *s, const DrfxConfig *cfg, const DrfxDataset *ds);

/**
 * Fixed-temperature distillation at `tau` against a trained teacher.
 */
DrfxStatus drfx_distill_fixed(DrfxStudent *s,
                              const DrfxTeacher *t,
                              const DrfxConfig *cfg,
                              const DrfxDataset *ds,
                              double tau);

/**
 * Dynamic distillation with the temperature controller from the config.
 */
DrfxStatus drfx_distill_dynamic(DrfxStudent *s,
                                const DrfxTeacher *t,
                                const DrfxConfig *cfg,
                                const DrfxDataset *ds);

DrfxStatus drfx_teacher_accuracy(const DrfxTeacher *t,
                                 const DrfxDataset *ds,
                                 DrfxSplit split,
                                 double *out_acc);

DrfxStatus drfx_student_accuracy(const DrfxStudent *s,
                                 const DrfxDataset *ds,
                                 DrfxSplit split,
                                 double *out_acc);

/**
 * Classify one raw I/Q frame: featurize with the config's STFT settings,
 * run the student, write the argmax label and (optionally) the logits.
 * `logits_out` may be null; otherwise `logits_cap` must be at least the
 * number of classes.
 */
DrfxStatus drfx_student_predict(const DrfxStudent *s,
                                const DrfxConfig *cfg,
                                const double *iq_i,
                                const double *iq_q,
                                uintptr_t n,
                                uint32_t *out_label,
                                double *logits_out,
                                uintptr_t logits_cap);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* DRFX_H */
