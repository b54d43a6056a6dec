#ifndef GEMUCO_H
#define GEMUCO_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result codes shared by every call.
typedef enum GemucoStatus {
  GEMUCO_STATUS_OK = 0,
  GEMUCO_STATUS_NULL_POINTER = 1,
  GEMUCO_STATUS_INVALID_ARGUMENT = 2,
  GEMUCO_STATUS_DIMENSION = 3,
  GEMUCO_STATUS_IO = 4,
  GEMUCO_STATUS_PARSE = 5,
  GEMUCO_STATUS_NON_FINITE = 6,
  GEMUCO_STATUS_INFEASIBLE = 7,
  GEMUCO_STATUS_PANIC = 8,
} GemucoStatus;

// A calibrated residual detector.
typedef struct GemucoDetector GemucoDetector;

// A trained model.
typedef struct GemucoModel GemucoModel;

// An online updater holding its own copy of the model.
typedef struct GemucoOnline GemucoOnline;

// Sizes of a loaded model.
typedef struct GemucoDims {
  // Channels of a raw sample.
  size_t data_dim;
  // Groups of a raw sample.
  size_t data_groups;
  // Groups the input mask ranges over.
  size_t in_groups;
  // Channels of a prediction.
  size_t out_dim;
  size_t pb_dim;
  size_t latent_dim;
} GemucoDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *gemuco_version(void);

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next failing call on the same thread.
const char *gemuco_last_error(void);

void gemuco_clear_error(void);

// Loads a model file written by the library or the CLI.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum GemucoStatus gemuco_model_load(const char *path, struct GemucoModel **out);

// # Safety
// `json` must be a NUL-terminated string and `out` writable.
enum GemucoStatus gemuco_model_from_json(const char *json, struct GemucoModel **out);

// # Safety
// `model` must come from this library and `path` be NUL-terminated.
enum GemucoStatus gemuco_model_save(const struct GemucoModel *model, const char *path);

// # Safety
// `model` must be null or a handle from this library not yet freed.
void gemuco_model_free(struct GemucoModel *model);

// # Safety
// `model` must be a live handle and `out` writable.
enum GemucoStatus gemuco_model_dims(const struct GemucoModel *model, struct GemucoDims *out);

// Trained bias of a state; zeros when the state is unknown.
//
// # Safety
// `state` must be NUL-terminated and `out` hold `out_len` doubles.
enum GemucoStatus gemuco_model_pb(const struct GemucoModel *model,
                                  const char *state,
                                  double *out,
                                  size_t out_len);

// Raw prediction of the output groups from a raw sample under `mask`, a
// string such as `"101"` over the input groups.
//
// # Safety
// Buffers must hold the stated number of doubles. `pb` may be null.
enum GemucoStatus gemuco_model_predict(const struct GemucoModel *model,
                                       const double *raw,
                                       size_t raw_len,
                                       const char *mask,
                                       const double *pb,
                                       size_t pb_len,
                                       double *out,
                                       size_t out_len);

// Fills the unavailable groups of a raw sample. `out` receives the full
// sample and `strategy` (may be null) 0 for a direct prediction, 1 for
// latent iteration and 2 for input iteration.
//
// # Safety
// `values` and `out` hold `len` doubles, `available` holds `n_groups`
// flags. `pb` may be null.
enum GemucoStatus gemuco_estimate(const struct GemucoModel *model,
                                  const double *values,
                                  size_t len,
                                  const bool *available,
                                  size_t n_groups,
                                  const double *pb,
                                  size_t pb_len,
                                  double *out,
                                  int32_t *strategy);

// Starts an online updater on a copy of `model`. `config_json` holds the
// updater settings as JSON (null for defaults) and `pb` the starting bias
// (null for zeros).
//
// # Safety
// `model` must be live, `config_json` null or NUL-terminated, `out` writable.
enum GemucoStatus gemuco_online_new(const struct GemucoModel *model,
                                    const char *config_json,
                                    const double *pb,
                                    size_t pb_len,
                                    struct GemucoOnline **out);

// Streams one sample. `updated` (may be null) is set to whether an update
// round ran.
//
// # Safety
// `values` holds `len` doubles and `available` holds `n_groups` flags.
enum GemucoStatus gemuco_online_observe(struct GemucoOnline *online,
                                        const double *values,
                                        size_t len,
                                        const bool *available,
                                        size_t n_groups,
                                        bool *updated);

// # Safety
// `out` must hold `out_len` doubles.
enum GemucoStatus gemuco_online_pb(const struct GemucoOnline *online, double *out, size_t out_len);

// Copy of the current weights as a new model handle.
//
// # Safety
// `online` must be live and `out` writable.
enum GemucoStatus gemuco_online_model(const struct GemucoOnline *online, struct GemucoModel **out);

// # Safety
// `online` must be null or a handle from this library not yet freed.
void gemuco_online_free(struct GemucoOnline *online);

// Fits a detector on `rows` residuals of width `dim`, stored row-major.
//
// # Safety
// `residuals` must hold `rows * dim` doubles and `out` be writable.
enum GemucoStatus gemuco_detector_calibrate(const double *residuals,
                                            size_t rows,
                                            size_t dim,
                                            struct GemucoDetector **out);

// Mahalanobis score of one residual and whether it exceeds the threshold.
//
// # Safety
// `residual` holds `dim` doubles; `score` and `anomalous` may be null.
enum GemucoStatus gemuco_detector_score(const struct GemucoDetector *detector,
                                        const double *residual,
                                        size_t dim,
                                        double *score,
                                        bool *anomalous);

// # Safety
// `detector` must be a live handle.
double gemuco_detector_threshold(const struct GemucoDetector *detector);

// # Safety
// `detector` must be null or a handle from this library not yet freed.
void gemuco_detector_free(struct GemucoDetector *detector);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEMUCO_H */
