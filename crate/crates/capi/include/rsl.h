/* C interface to the RSL training laboratory. Generated; do not edit. */

#ifndef RSL_CAPI_H
#define RSL_CAPI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Zero is success; anything else left
 * a message in `rsl_last_error`.
 */
typedef enum RslStatus {
  RslStatus_Ok = 0,
  RslStatus_NullArgument = 1,
  RslStatus_InvalidUtf8 = 2,
  RslStatus_InvalidConfig = 3,
  RslStatus_BadData = 4,
  RslStatus_DecodeFailed = 5,
  RslStatus_Internal = 6,
} RslStatus;

/**
 * Opaque translation model: parameters plus both vocabularies.
 */
typedef struct RslModel RslModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version of the underlying library, as a static string.
 */
const char *rsl_version(void);

/**
 * Message for the most recent failure on this thread. Borrowed; valid
 * until the next failing call on the same thread. Empty if none.
 */
const char *rsl_last_error(void);

/**
 * Loads a checkpoint plus its two vocabulary files. Returns null on
 * failure (see `rsl_last_error`). The handle must be released with
 * `rsl_model_free`.
 *
 * # Safety
 * All three arguments must be null or NUL-terminated strings valid
 * for the duration of the call.
 */
struct RslModel *rsl_model_load(const char *checkpoint_path,
                                const char *source_vocab_path,
                                const char *target_vocab_path);

/**
 * Saves the model as a checkpoint file (no optimizer state).
 *
 * # Safety
 * `model` must be null or a live handle from `rsl_model_load`; `path`
 * must be null or a NUL-terminated string.
 */
enum RslStatus rsl_model_save(const struct RslModel *model, const char *path);

/**
 * Releases a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must be null or a live handle from `rsl_model_load`, not
 * used again afterwards.
 */
void rsl_model_free(struct RslModel *model);

/**
 * Architecture name ("attention", "recurrent", "convolutional") as a
 * static string; null if `model` is null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
const char *rsl_model_arch(const struct RslModel *model);

/**
 * Generation direction ("l2r" or "r2l") as a static string; null if
 * `model` is null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
const char *rsl_model_direction(const struct RslModel *model);

/**
 * Translates one whitespace-tokenized source line with beam search.
 * Unknown tokens map to the unk id. On success `*out_target` holds a
 * malloc-style string the caller releases with `rsl_string_free`.
 *
 * # Safety
 * `model` must be a live handle; `source_line` a NUL-terminated
 * string; `out_target` a valid destination pointer. Nulls are
 * reported as `NullArgument`.
 */
enum RslStatus rsl_translate(const struct RslModel *model,
                             const char *source_line,
                             uintptr_t beam,
                             double alpha,
                             uintptr_t max_len,
                             char **out_target);

/**
 * Log-probability of a whitespace-tokenized target line given a
 * source line, written to `*out_log_prob`.
 *
 * # Safety
 * Same pointer rules as `rsl_translate`.
 */
enum RslStatus rsl_log_prob(const struct RslModel *model,
                            const char *source_line,
                            const char *target_line,
                            double *out_log_prob);

/**
 * Corpus BLEU between newline-separated, whitespace-tokenized
 * hypothesis and reference blocks (one sentence per line, equal line
 * counts). Written to `*out_bleu` on the 0-100 scale.
 *
 * # Safety
 * Both blocks must be null or NUL-terminated strings; `out_bleu` a
 * valid destination pointer.
 */
enum RslStatus rsl_bleu(const char *hypothesis_lines,
                        const char *reference_lines,
                        double *out_bleu);

/**
 * Releases a string returned through an out parameter. Null is a
 * no-op.
 *
 * # Safety
 * `s` must be null or a pointer previously produced by this library,
 * not used again afterwards.
 */
void rsl_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RSL_CAPI_H */
