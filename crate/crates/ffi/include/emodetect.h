#ifndef EMODETECT_H
#define EMODETECT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EmoStatus {
  EMO_STATUS_OK = 0,
  EMO_STATUS_NULL_ARGUMENT = 1,
  EMO_STATUS_INVALID_UTF8 = 2,
  EMO_STATUS_INVALID_ARGUMENT = 3,
  EMO_STATUS_PARSE = 4,
  EMO_STATUS_IO = 5,
  EMO_STATUS_DATA = 6,
  EMO_STATUS_CONFIG = 7,
  EMO_STATUS_BACKEND = 8,
  // The call succeeded but some predictions fell back to Neutral.
  EMO_STATUS_DEGRADED = 9,
  EMO_STATUS_PANIC = 255,
} EmoStatus;

// Loaded gold or unlabeled dataset.
typedef struct EmoDataset EmoDataset;

// A strategy bound to a backend.
typedef struct EmoEngine EmoEngine;

// Prediction file for one run.
typedef struct EmoPredictions EmoPredictions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. The pointer
// stays valid until the next emodetect call on the same thread.
const char *emo_last_error(void);

// # Safety
// `s` must be null or a string returned by this library.
void emo_string_free(char *s);

// Canonical name of label code 0..=5 (Love, Joy, Anger, Fear, Sadness,
// Neutral), or null for anything else. Static storage.
const char *emo_label_name(int32_t code);

// Parses raw model output into a label code.
//
// # Safety
// `raw` must be a valid C string; `out_code` must be writable.
enum EmoStatus emo_label_parse(const char *raw, int32_t *out_code);

// Loads a TSV/CSV dataset. Null column names select the defaults
// (`ID`, `Texts`, `Labels`); `labeled == 0` ignores the label column.
//
// # Safety
// String arguments must be null or valid C strings; `out` must be writable.
enum EmoStatus emo_dataset_load(const char *path,
                                const char *id_col,
                                const char *text_col,
                                const char *label_col,
                                int32_t labeled,
                                struct EmoDataset **out);

// # Safety
// The handle must be null or live.
size_t emo_dataset_len(const struct EmoDataset *d);

// # Safety
// `d` must be null or a handle from [`emo_dataset_load`], freed once.
void emo_dataset_free(struct EmoDataset *d);

// # Safety
// `path` must be a valid C string; `out` must be writable.
enum EmoStatus emo_predictions_read(const char *path, struct EmoPredictions **out);

// # Safety
// `p` must be a live predictions handle; `path` a valid C string.
enum EmoStatus emo_predictions_write(const struct EmoPredictions *p, const char *path);

// # Safety
// The handle must be null or live.
size_t emo_predictions_len(const struct EmoPredictions *p);

// Number of predictions that fell back to Neutral.
//
// # Safety
// The handle must be null or live.
size_t emo_predictions_fallbacks(const struct EmoPredictions *p);

// Label code of prediction `index`.
//
// # Safety
// `p` must be a live predictions handle; `out_code` must be writable.
enum EmoStatus emo_predictions_label(const struct EmoPredictions *p,
                                     size_t index,
                                     int32_t *out_code);

// # Safety
// `p` must be null or a handle from this library, freed once.
void emo_predictions_free(struct EmoPredictions *p);

// Scores predictions against gold labels; writes the report as JSON.
//
// # Safety
// Handles must be live; `out_json` must be writable.
enum EmoStatus emo_evaluate(const struct EmoDataset *gold,
                            const struct EmoPredictions *pred,
                            char **out_json);

// Majority vote over `n` member files. `mode` is `unweighted` or
// `weighted`; weighted mode takes `weights_json`, an object mapping each
// member's model id to its weight.
//
// # Safety
// `members` must point to `n` live handles; strings must be null or valid.
enum EmoStatus emo_vote(const struct EmoPredictions *const *members,
                        size_t n,
                        const char *mode,
                        const char *weights_json,
                        const char *name,
                        struct EmoPredictions **out);

// Builds an engine from a backend TOML file and a strategy name
// (`zero-shot`, `zse`, `zsec`, `finetuned`). Credentials are read from the
// environment variable named in the backend file.
//
// # Safety
// Strings must be valid C strings (`model_id` may be null); `out` writable.
enum EmoStatus emo_engine_new(const char *backend_config,
                              const char *strategy,
                              const char *model_id,
                              struct EmoEngine **out);

// Classifies one text. Returns `Degraded` (with the code set to Neutral)
// when the model output could not be parsed.
//
// # Safety
// `engine` must be live; `text` a valid C string; `out_code` writable.
enum EmoStatus emo_engine_classify_text(const struct EmoEngine *engine,
                                        const char *text,
                                        int32_t *out_code);

// Runs the engine over a dataset. Returns `Degraded` when any prediction
// fell back to Neutral; the output handle is set either way.
//
// # Safety
// Handles must be live; `out` must be writable.
enum EmoStatus emo_engine_run(const struct EmoEngine *engine,
                              const struct EmoDataset *d,
                              struct EmoPredictions **out);

// # Safety
// `e` must be null or a handle from [`emo_engine_new`], freed once.
void emo_engine_free(struct EmoEngine *e);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EMODETECT_H */
