#ifndef WABERT_H
#define WABERT_H

#include <stddef.h>
#include <stdint.h>

#define WABERT_NUM_CLASSES 3

typedef enum WabertStatus {
  WABERT_STATUS_OK = 0,
  WABERT_STATUS_NULL_POINTER = 1,
  WABERT_STATUS_INVALID_ARGUMENT = 2,
  WABERT_STATUS_SHAPE_MISMATCH = 3,
  WABERT_STATUS_NUMERIC = 4,
  WABERT_STATUS_ALIGNMENT = 5,
  WABERT_STATUS_IO = 6,
  WABERT_STATUS_CORRUPT_FILE = 7,
  WABERT_STATUS_CONFIG = 8,
  WABERT_STATUS_BUFFER_TOO_SMALL = 9,
  WABERT_STATUS_PANIC = 10,
} WabertStatus;

typedef enum WabertTailPolicy {
  WABERT_TAIL_POLICY_FIRE_IF_AT_LEAST_HALF = 0,
  WABERT_TAIL_POLICY_ALWAYS_FIRE = 1,
  WABERT_TAIL_POLICY_DISCARD = 2,
} WabertTailPolicy;

/**
 * Opaque in-memory corpus.
 */
typedef struct WabertCorpus WabertCorpus;

/**
 * Opaque trained model.
 */
typedef struct WabertModel WabertModel;

/**
 * Evaluation summary. `recall_weighted` and `f1_weighted` are NaN and
 * `has_scores` is 0 when the model has no classifier.
 */
typedef struct WabertMetrics {
  double mae_ms;
  double median_ms;
  double acc_50;
  double acc_100;
  double acc_500;
  double acc_1000;
  double diagonality;
  double recall_weighted;
  double f1_weighted;
  double top1;
  double top5;
  size_t utterances;
  size_t tokens;
  uint8_t has_scores;
} WabertMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static nul-terminated string.
 */
const char *wabert_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always nul-terminated when `cap > 0`) and returns the full length
 * including the terminator.
 *
 * # Safety
 * `buf` must be null or valid for `cap` bytes.
 */
size_t wabert_last_error(char *buf, size_t cap);

/**
 * Runs integrate-and-fire on the weights `alpha[0..m]` and writes the
 * left and right boundary (ms) of each fired token. `target` > 0 rescales
 * the weights to sum to `target` first. `*n_tokens` always receives the
 * number of tokens; `WABERT_STATUS_BUFFER_TOO_SMALL` is returned if it
 * exceeds `cap`.
 *
 * # Safety
 * `alpha` must be valid for `m` reads, `left_ms` and `right_ms` for `cap`
 * writes, and `n_tokens` for one write.
 */
enum WabertStatus wabert_cif_boundaries(const double *alpha,
                                        size_t m,
                                        double hop_ms,
                                        double beta,
                                        enum WabertTailPolicy tail,
                                        size_t target,
                                        double *left_ms,
                                        double *right_ms,
                                        size_t cap,
                                        size_t *n_tokens);

/**
 * Loads a checkpoint written by `wabert train-align` or `finetune`.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` valid for one write.
 */
enum WabertStatus wabert_model_load(const char *path, struct WabertModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`wabert_model_load`] and not be used afterwards.
 */
void wabert_model_free(struct WabertModel *model);

/**
 * Writes the graft depth and whether a classifier head is attached.
 *
 * # Safety
 * `model` must be a live handle; the outputs valid for one write each.
 */
enum WabertStatus wabert_model_info(const struct WabertModel *model,
                                    size_t *graft_depth,
                                    size_t *d_in,
                                    uint8_t *has_classifier);

/**
 * Runs inference on `raw` (`m_raw` rows of `d_in` features, row-major).
 * Writes up to `cap` predicted token ids and the total into `*n_tokens`.
 * `class_probs` (length `WABERT_NUM_CLASSES`) may be null; it is filled
 * only when the model has a classifier.
 *
 * # Safety
 * Buffers must be valid for the stated lengths.
 */
enum WabertStatus wabert_model_infer(const struct WabertModel *model,
                                     const double *raw,
                                     size_t m_raw,
                                     size_t d_in,
                                     double raw_hop_ms,
                                     uint32_t *token_ids,
                                     size_t cap,
                                     size_t *n_tokens,
                                     double *class_probs);

/**
 * Generates `count` synthetic utterances with default settings and `seed`.
 *
 * # Safety
 * `out` must be valid for one write.
 */
enum WabertStatus wabert_corpus_generate(uint64_t seed, size_t count, struct WabertCorpus **out);

/**
 * Loads a corpus directory written by `wabert gen-data`.
 *
 * # Safety
 * `dir` must be a nul-terminated string and `out` valid for one write.
 */
enum WabertStatus wabert_corpus_load(const char *dir, struct WabertCorpus **out);

/**
 * Number of utterances, 0 for null.
 *
 * # Safety
 * `corpus` must be null or a live handle.
 */
size_t wabert_corpus_len(const struct WabertCorpus *corpus);

/**
 * Releases a corpus; null is ignored.
 *
 * # Safety
 * `corpus` must come from a corpus constructor and not be used afterwards.
 */
void wabert_corpus_free(struct WabertCorpus *corpus);

/**
 * Evaluates `model` on every utterance of `corpus`.
 *
 * # Safety
 * Handles must be live and `out` valid for one write.
 */
enum WabertStatus wabert_evaluate(const struct WabertModel *model,
                                  const struct WabertCorpus *corpus,
                                  struct WabertMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WABERT_H */
