#ifndef SAMOE_FFI_H
#define SAMOE_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SamoeStatus {
  SAMOE_STATUS_OK = 0,
  SAMOE_STATUS_NULL_POINTER = 1,
  SAMOE_STATUS_INVALID_ARGUMENT = 2,
  SAMOE_STATUS_IO = 3,
  SAMOE_STATUS_FORMAT = 4,
  SAMOE_STATUS_MODEL = 5,
  SAMOE_STATUS_RUNTIME = 6,
  SAMOE_STATUS_BUFFER_TOO_SMALL = 7,
  SAMOE_STATUS_PANIC = 8,
} SamoeStatus;

/**
 * A loaded model. Shared by every session created from it.
 */
typedef struct SamoeModel SamoeModel;

/**
 * Streaming decoder state over one model.
 */
typedef struct SamoeSession SamoeSession;

typedef struct SamoeModelInfo {
  size_t n_layers;
  size_t d_model;
  size_t n_heads;
  size_t n_kv_heads;
  size_t d_head;
  size_t n_experts;
  size_t vocab_total;
  /**
   * Per-block slot counts.
   */
  size_t speech_slots;
  size_t image_slots;
  size_t text_slots;
  size_t action_slots;
  size_t n_params;
} SamoeModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * NUL-terminated library version.
 */
const char *samoe_version(void);

/**
 * Copy the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `cap`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t samoe_last_error(char *buf, size_t cap);

/**
 * Load a model container or training checkpoint from disk.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SamoeStatus samoe_model_load(const char *path, struct SamoeModel **out);

/**
 * Load a model from an in-memory container.
 *
 * # Safety
 * `data` must point to `len` readable bytes; `out` must be writable.
 */
enum SamoeStatus samoe_model_load_bytes(const uint8_t *data, size_t len, struct SamoeModel **out);

/**
 * Fresh randomly initialised two-expert model in the small geometry.
 *
 * # Safety
 * `out` must be writable.
 */
enum SamoeStatus samoe_model_new_random(uint64_t seed, struct SamoeModel **out);

/**
 * Write the model container to `path`.
 *
 * # Safety
 * `model` must come from a `samoe_model_*` constructor; `path` must be NUL-terminated.
 */
enum SamoeStatus samoe_model_save(const struct SamoeModel *model, const char *path);

/**
 * # Safety
 * `model` must be null or come from a `samoe_model_*` constructor, and not be used afterwards.
 */
void samoe_model_free(struct SamoeModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum SamoeStatus samoe_model_info(const struct SamoeModel *model, struct SamoeModelInfo *out);

/**
 * Open a streaming session. The session keeps the model alive.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum SamoeStatus samoe_session_new(const struct SamoeModel *model, struct SamoeSession **out);

/**
 * # Safety
 * `session` must be null or a live handle, and not be used afterwards.
 */
void samoe_session_free(struct SamoeSession *session);

/**
 * Start an episode: clears the cache and feeds the system prompt.
 * `speech_only` nonzero selects the speech-only block form.
 *
 * # Safety
 * `session` must be a live handle; `prompt` must point to `n_prompt` ids.
 */
enum SamoeStatus samoe_session_begin(struct SamoeSession *session,
                                     const size_t *prompt,
                                     size_t n_prompt,
                                     uint8_t speech_only);

/**
 * Sampling temperature (0 = greedy) and seed for later steps.
 *
 * # Safety
 * `session` must be a live handle.
 */
enum SamoeStatus samoe_session_set_sampling(struct SamoeSession *session,
                                            double temperature,
                                            uint64_t seed);

/**
 * Feed one block of speech (and, outside speech-only mode, image) tokens and
 * decode that block's text and action payloads. `n_image` must be zero in
 * speech-only mode and a multiple of the per-frame image length otherwise.
 * On `BufferTooSmall` the required lengths are still written.
 *
 * # Safety
 * Input pointers must cover their counts; output buffers must hold their capacities;
 * `text_len` and `action_len` must be writable.
 */
enum SamoeStatus samoe_session_step(struct SamoeSession *session,
                                    const size_t *speech,
                                    size_t n_speech,
                                    const size_t *image,
                                    size_t n_image,
                                    size_t *text_out,
                                    size_t text_cap,
                                    size_t *text_len,
                                    size_t *action_out,
                                    size_t action_cap,
                                    size_t *action_len);

/**
 * Run one task kind over seeds `seed_lo..=seed_hi` and report its success rate.
 *
 * # Safety
 * `model` must be a live handle; `task` NUL-terminated; `success_rate` writable.
 */
enum SamoeStatus samoe_eval_task(const struct SamoeModel *model,
                                 const char *task,
                                 uint64_t seed_lo,
                                 uint64_t seed_hi,
                                 double *success_rate);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAMOE_FFI_H */
