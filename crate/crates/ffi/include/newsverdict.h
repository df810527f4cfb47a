#ifndef NEWSVERDICT_H
#define NEWSVERDICT_H

#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum NvStatus {
  NV_STATUS_OK = 0,
  NV_STATUS_NULL_ARGUMENT = 1,
  NV_STATUS_INVALID_UTF8 = 2,
  NV_STATUS_INVALID_ARGUMENT = 3,
  NV_STATUS_CONFIG = 4,
  NV_STATUS_DATASET = 5,
  NV_STATUS_UNPARSEABLE = 6,
  NV_STATUS_PANIC = 7,
} NvStatus;

typedef enum NvLabel {
  NV_LABEL_REAL = 0,
  NV_LABEL_FAKE = 1,
} NvLabel;

// A datastore opened for direct nearest-neighbor queries.
typedef struct NvDatastore NvDatastore;

// Loaded configuration, datastore and backends.
typedef struct NvPipeline NvPipeline;

// Model requests made through a pipeline handle, per stage.
typedef struct NvCallCounts {
  uint64_t detection;
  uint64_t inside_judge;
  uint64_t outside_judge;
  uint64_t determination;
  uint64_t retries;
} NvCallCounts;

// Fake-as-positive scores for a list of predictions.
typedef struct NvMetrics {
  double accuracy;
  double precision;
  double recall;
  double f1;
  uint64_t tp;
  uint64_t fp;
  uint64_t fn_;
  uint64_t tn;
  uint64_t n_evaluated;
} NvMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static string that must not be freed.
const char *nv_version(void);

// Message for the last failed call on this thread, or null. Valid until the
// next failing call on the same thread; do not free.
const char *nv_last_error_message(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must be null or a pointer obtained from this library that has not
// been freed yet.
void nv_string_free(char *s);

// Opens a pipeline from a configuration file. Environment overrides apply
// as for the command-line tool. `inside.store_path` must name a datastore.
//
// # Safety
// `config_path` must be a valid C string; `out` a valid pointer.
enum NvStatus nv_pipeline_open(const char *config_path, struct NvPipeline **out);

// Releases a pipeline. Null is ignored.
//
// # Safety
// `pipeline` must be null or a handle from [`nv_pipeline_open`] that has
// not been freed and is not in use on another thread.
void nv_pipeline_free(struct NvPipeline *pipeline);

// Runs one article (a JSON record with `id`, `title`, `text`, `tweets` and
// optional `label`) and returns its full trace as JSON. A run that ends
// without a verdict still returns `NV_STATUS_OK`; inspect the trace's
// `verdict` and `stage_errors`.
//
// # Safety
// `pipeline` must be a live handle, `article_json` a valid C string and
// `trace_json_out` a valid pointer.
enum NvStatus nv_pipeline_run(const struct NvPipeline *pipeline,
                              const char *article_json,
                              char **trace_json_out);

// Model requests made so far through this pipeline.
//
// # Safety
// `pipeline` must be a live handle and `out` a valid pointer.
enum NvStatus nv_pipeline_call_counts(const struct NvPipeline *pipeline, struct NvCallCounts *out);

// Content digest of an article record, as lowercase hex.
//
// # Safety
// `article_json` must be a valid C string and `out` a valid pointer.
enum NvStatus nv_article_digest(const char *article_json, char **out);

// Extracts the verdict and explanation from a raw judge completion.
// Returns `NV_STATUS_UNPARSEABLE` when no verdict marker is present.
//
// # Safety
// `raw` must be a valid C string; `label_out` and `explanation_out` valid
// pointers.
enum NvStatus nv_parse_verdict(const char *raw, enum NvLabel *label_out, char **explanation_out);

// Scores `len` predictions against gold labels, each encoded 0 = real,
// 1 = fake. `len` must be positive.
//
// # Safety
// `predicted` and `gold` must point to `len` readable bytes each; `out`
// must be a valid pointer.
enum NvStatus nv_compute_metrics(const uint8_t *predicted,
                                 const uint8_t *gold,
                                 size_t len,
                                 struct NvMetrics *out);

// Opens a datastore file. With a non-null `expected_fingerprint`, a store
// built by a different encoder is rejected.
//
// # Safety
// `path` must be a valid C string, `expected_fingerprint` null or a valid C
// string, and `out` a valid pointer.
enum NvStatus nv_datastore_open(const char *path,
                                const char *expected_fingerprint,
                                struct NvDatastore **out);

// Number of entries in the store, or 0 for a null handle.
//
// # Safety
// `store` must be null or a live handle.
size_t nv_datastore_len(const struct NvDatastore *store);

// Embedding dimension of the store, or 0 for a null handle.
//
// # Safety
// `store` must be null or a live handle.
size_t nv_datastore_dim(const struct NvDatastore *store);

// Retrieves the `k` nearest fake and `k` nearest real entries to `query`
// and returns them as JSON `{"positive": [...], "negative": [...]}`.
//
// # Safety
// `store` must be a live handle, `query` must point to `dim` readable
// doubles and `json_out` must be a valid pointer.
enum NvStatus nv_datastore_query(const struct NvDatastore *store,
                                 const double *query,
                                 size_t dim,
                                 size_t k,
                                 char **json_out);

// Releases a datastore. Null is ignored.
//
// # Safety
// `store` must be null or a handle from [`nv_datastore_open`] that has not
// been freed.
void nv_datastore_free(struct NvDatastore *store);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NEWSVERDICT_H */
