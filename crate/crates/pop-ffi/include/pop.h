#ifndef POP_H
#define POP_H

/* Generated by cbindgen from the pop-ffi crate; edit the Rust source instead. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. `Ok` is zero; everything else is a
 * failure whose human-readable detail is available from
 * [`pop_last_error_message`] on the calling thread.
 */
typedef enum PopStatus {
  POP_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  POP_STATUS_NULL_ARGUMENT = 1,
  /**
   * A path or JSON argument was not valid UTF-8.
   */
  POP_STATUS_INVALID_UTF8 = 2,
  /**
   * Invalid configuration or argument value.
   */
  POP_STATUS_CONFIG = 3,
  /**
   * An API contract was violated (e.g. a plan names a missing layer).
   */
  POP_STATUS_CONTRACT = 4,
  /**
   * The request would exceed the model's maximum sequence length.
   */
  POP_STATUS_CAPACITY = 5,
  /**
   * Malformed input data.
   */
  POP_STATUS_DATA = 6,
  /**
   * Malformed checkpoint, config, or plan artifact.
   */
  POP_STATUS_FORMAT = 7,
  /**
   * Filesystem failure; the message names the path.
   */
  POP_STATUS_IO = 8,
  /**
   * An index (token id, layer, position) was out of bounds.
   */
  POP_STATUS_INDEX = 9,
  /**
   * Internal shape mismatch.
   */
  POP_STATUS_DIMENSION = 10,
  /**
   * A computation produced NaN or infinity.
   */
  POP_STATUS_NON_FINITE = 11,
  /**
   * A bug: the library panicked and the unwind was contained here.
   */
  POP_STATUS_PANIC = 12,
} PopStatus;

/**
 * Opaque model handle. Create with [`pop_model_load`] or
 * [`pop_model_init`], release with [`pop_model_free`].
 */
typedef struct PopModel PopModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint from `path` into a fresh handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum PopStatus pop_model_load(const char *path, struct PopModel **out);

/**
 * Initializes a fresh randomly-seeded model from a JSON model config.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` must be valid.
 */
enum PopStatus pop_model_init(const char *config_json, uint64_t seed, struct PopModel **out);

/**
 * Writes the model to `path` in checkpoint format.
 *
 * # Safety
 * `model` must come from this library and still be live; `path` must be a
 * NUL-terminated string.
 */
enum PopStatus pop_model_save(const struct PopModel *model, const char *path);

/**
 * Releases a handle. NULL is a no-op. The handle must not be used again.
 *
 * # Safety
 * `model` must be NULL or a live handle from this library.
 */
void pop_model_free(struct PopModel *model);

/**
 * Reports the model's layer count, for building pruning plans client-side.
 *
 * # Safety
 * `model` must be a live handle; `out` must be a valid pointer.
 */
enum PopStatus pop_model_num_layers(const struct PopModel *model, size_t *out);

/**
 * Returns the SHA-256 of the model's weights as lowercase hex, allocated
 * with the shared buffer convention.
 *
 * # Safety
 * `model` must be a live handle; `out_hash` and `out_len` must be valid.
 */
enum PopStatus pop_model_hash(const struct PopModel *model, char **out_hash, size_t *out_len);

/**
 * Full-model generation. The output is the decoded continuation only —
 * the prompt is not echoed; `temperature` 0 is greedy.
 *
 * # Safety
 * `model` must be a live handle; `prompt` must be NUL-terminated;
 * `out_text` and `out_len` must be valid pointers.
 */
enum PopStatus pop_generate_text(const struct PopModel *model,
                                 const char *prompt,
                                 size_t max_new,
                                 double temperature,
                                 uint64_t seed,
                                 char **out_text,
                                 size_t *out_len);

/**
 * Generation with a pruned prefill: the plan's layers are skipped while
 * the prompt is processed and the full model handles every decoded token.
 * `plan_json` uses the same schema the CLI reads and writes, with 1-based
 * layer numbers.
 *
 * # Safety
 * Same as [`pop_generate_text`], plus `plan_json` must be NUL-terminated.
 */
enum PopStatus pop_pruned_generate_text(const struct PopModel *model,
                                        const char *prompt,
                                        const char *plan_json,
                                        size_t max_new,
                                        double temperature,
                                        uint64_t seed,
                                        char **out_text,
                                        size_t *out_len);

/**
 * Analytic prefill FLOP counts for a config under a plan, returned as a
 * JSON report. Needs no model weights.
 *
 * # Safety
 * `config_json` and `plan_json` must be NUL-terminated strings;
 * `out_json` and `out_len` must be valid pointers.
 */
enum PopStatus pop_flops_json(const char *config_json,
                              const char *plan_json,
                              size_t seq_len,
                              char **out_json,
                              size_t *out_len);

/**
 * The message for the most recent call on this thread: empty after a
 * success, a description after a failure. The pointer stays valid until
 * the next call from the same thread; do not free it.
 */
const char *pop_last_error_message(void);

/**
 * Releases a buffer returned by this library. `len` must be the length
 * the producing call reported. NULL is a no-op.
 *
 * # Safety
 * `ptr`/`len` must be exactly as returned by one earlier call, unreleased.
 */
void pop_buffer_free(char *ptr, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POP_H */
