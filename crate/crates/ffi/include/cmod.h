#ifndef CMOD_H
#define CMOD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CmodStatus {
  CMOD_STATUS_OK = 0,
  CMOD_STATUS_NULL_POINTER = 1,
  CMOD_STATUS_INVALID_ARGUMENT = 2,
  CMOD_STATUS_IO = 3,
  CMOD_STATUS_BAD_CHECKPOINT = 4,
  CMOD_STATUS_TIME_REGRESSION = 5,
  CMOD_STATUS_NOT_READY = 6,
  CMOD_STATUS_BUFFER_TOO_SMALL = 7,
  CMOD_STATUS_INTERNAL = 8,
} CmodStatus;

/**
 * Opaque engine handle.
 */
typedef struct CmodEngine CmodEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cmod_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated, always
 * NUL-terminated when `len > 0`). Returns the full message length including the NUL,
 * or 0 when there is no message.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t cmod_last_error(char *buf, size_t len);

/**
 * Loads a checkpoint and starts an engine whose memories begin at time `t0`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum CmodStatus cmod_engine_open(const char *path, double t0, struct CmodEngine **out);

/**
 * Releases an engine. Null is ignored.
 *
 * # Safety
 * `engine` must be null or a handle from [`cmod_engine_open`] not yet freed.
 */
void cmod_engine_free(struct CmodEngine *engine);

/**
 * Number of nodes the engine's model was trained on.
 *
 * # Safety
 * `engine` must be a live handle; `out` a valid pointer.
 */
enum CmodStatus cmod_engine_node_count(const struct CmodEngine *engine, size_t *out);

/**
 * Time of the last memory update.
 *
 * # Safety
 * `engine` must be a live handle; `out` a valid pointer.
 */
enum CmodStatus cmod_engine_last_update(const struct CmodEngine *engine, double *out);

/**
 * Queues one trip. Timestamps must not decrease and must not precede the last update.
 *
 * # Safety
 * `engine` must be a live handle.
 */
enum CmodStatus cmod_engine_push_event(struct CmodEngine *engine,
                                       size_t origin,
                                       size_t destination,
                                       double timestamp);

/**
 * Updates the memories with every queued event before `window_end` and computes the
 * forecast for `[window_end, window_end + tau)`. Later events stay queued.
 *
 * # Safety
 * `engine` must be a live handle.
 */
enum CmodStatus cmod_engine_advance(struct CmodEngine *engine, double window_end);

/**
 * Writes the latest forecast (row-major `N×N`, negatives clamped to zero) into `out`.
 *
 * # Safety
 * `engine` must be a live handle; `out` must point to `len` writable doubles.
 */
enum CmodStatus cmod_engine_predict(const struct CmodEngine *engine, double *out, size_t len);

/**
 * Drops queued events and the forecast and restarts the memories at `t0`.
 *
 * # Safety
 * `engine` must be a live handle.
 */
enum CmodStatus cmod_engine_reset(struct CmodEngine *engine, double t0);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CMOD_H */
