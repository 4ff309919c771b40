#ifndef EVOLVER_H
#define EVOLVER_H

/* Generated by cbindgen from crates/ffi. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EvolverStatus {
  EVOLVER_STATUS_OK = 0,
  EVOLVER_STATUS_NULL_POINTER = 1,
  EVOLVER_STATUS_INVALID_UTF8 = 2,
  EVOLVER_STATUS_INVALID_ARGUMENT = 3,
  EVOLVER_STATUS_IO = 4,
  EVOLVER_STATUS_PARSE = 5,
  EVOLVER_STATUS_OUT_OF_RANGE = 6,
  EVOLVER_STATUS_PANIC = 99,
} EvolverStatus;

typedef enum EvolverFailureCategory {
  EVOLVER_FAILURE_CATEGORY_NONE = 0,
  EVOLVER_FAILURE_CATEGORY_STAGNANT_COMPLEXITY = 1,
  EVOLVER_FAILURE_CATEGORY_INSUFFICIENT_QUALIFICATION = 2,
  EVOLVER_FAILURE_CATEGORY_LOSS_OF_KEY_INFORMATION = 3,
  EVOLVER_FAILURE_CATEGORY_NO_RESPONSE = 4,
} EvolverFailureCategory;

/**
 * Opaque in-memory instruction dataset.
 */
typedef struct EvolverDataset EvolverDataset;

/**
 * Opaque n-gram index over benchmark items.
 */
typedef struct EvolverNgramIndex EvolverNgramIndex;

/**
 * Optimizer settings for `evolver_estimate_cost`.
 */
typedef struct EvolverCostParams {
  uint64_t steps;
  uint64_t batch_size;
  uint64_t trajectory_rounds;
  uint64_t candidates;
  uint64_t dev_size;
} EvolverCostParams;

typedef struct EvolverCostReport {
  uint64_t full_evolution_calls;
  uint64_t optimization_calls;
  uint64_t total_calls;
} EvolverCostReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy of the last error message on this thread, or null if none. Free it
 * with `evolver_string_free`.
 */
char *evolver_last_error_message(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a pointer returned by this library, freed once.
 */
void evolver_string_free(char *s);

/**
 * Classifies a generated response with the default failure rules.
 *
 * # Safety
 * `response` must be a nul-terminated string; `out_category` writable.
 */
enum EvolverStatus evolver_classify(const char *response,
                                    enum EvolverFailureCategory *out_category);

/**
 * Fraction of `dev_size` entries flagged in `failed` (nonzero = failed).
 *
 * # Safety
 * `failed` must point to `len` readable bytes (may be null when `len` is 0).
 */
enum EvolverStatus evolver_failure_rate(const uint8_t *failed,
                                        size_t len,
                                        size_t dev_size,
                                        double *out_rate);

/**
 * Pulls the final instruction out of an evolution output. A null `marker`
 * selects the default marker. `out_format_warning` may be null.
 *
 * # Safety
 * String arguments must be nul-terminated; `out_text` writable.
 */
enum EvolverStatus evolver_extract_final_instruction(const char *output,
                                                     const char *marker,
                                                     char **out_text,
                                                     bool *out_format_warning);

/**
 * Optimizer defaults for `evolver_estimate_cost`.
 */
struct EvolverCostParams evolver_default_cost_params(void);

/**
 * API-call estimate; a null `params` uses the optimizer defaults.
 *
 * # Safety
 * `params` must be null or readable; `out` writable.
 */
enum EvolverStatus evolver_estimate_cost(uint64_t datasize,
                                         uint64_t rounds,
                                         const struct EvolverCostParams *params,
                                         struct EvolverCostReport *out);

/**
 * New empty index of `n`-grams with the default tokenizer.
 *
 * # Safety
 * `out` must be writable.
 */
enum EvolverStatus evolver_ngram_index_new(size_t n, struct EvolverNgramIndex **out);

/**
 * Adds the n-grams of one benchmark item.
 *
 * # Safety
 * `index` must be a live handle; `text` nul-terminated.
 */
enum EvolverStatus evolver_ngram_index_add(struct EvolverNgramIndex *index, const char *text);

/**
 * Whether any n-gram of `text` is in the index.
 *
 * # Safety
 * `index` must be a live handle; `text` nul-terminated; `out` writable.
 */
enum EvolverStatus evolver_ngram_index_matches(const struct EvolverNgramIndex *index,
                                               const char *text,
                                               bool *out);

/**
 * # Safety
 * `index` must be null or a handle from `evolver_ngram_index_new`, freed once.
 */
void evolver_ngram_index_free(struct EvolverNgramIndex *index);

/**
 * Loads a JSONL dataset.
 *
 * # Safety
 * `path` nul-terminated; `out` writable.
 */
enum EvolverStatus evolver_dataset_load(const char *path, struct EvolverDataset **out);

/**
 * Number of records; 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t evolver_dataset_len(const struct EvolverDataset *dataset);

/**
 * Id of record `i`.
 *
 * # Safety
 * `dataset` must be a live handle; `out_id` writable.
 */
enum EvolverStatus evolver_dataset_record_id(const struct EvolverDataset *dataset,
                                             size_t i,
                                             char **out_id);

/**
 * New dataset holding the records whose round is in `rounds`.
 *
 * # Safety
 * `dataset` must be a live handle; `rounds` must point to `n_rounds`
 * values; `out` writable.
 */
enum EvolverStatus evolver_dataset_mix(const struct EvolverDataset *dataset,
                                       const uint32_t *rounds,
                                       size_t n_rounds,
                                       struct EvolverDataset **out);

/**
 * Writes the dataset as JSONL.
 *
 * # Safety
 * `dataset` must be a live handle; `path` nul-terminated.
 */
enum EvolverStatus evolver_dataset_save(const struct EvolverDataset *dataset, const char *path);

/**
 * # Safety
 * `dataset` must be null or a handle from this library, freed once.
 */
void evolver_dataset_free(struct EvolverDataset *dataset);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EVOLVER_H */
