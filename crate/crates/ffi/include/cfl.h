#ifndef CFL_H
#define CFL_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CflStatus {
  CFL_STATUS_OK = 0,
  CFL_STATUS_NULL_POINTER = 1,
  /**
   * Unparseable or invalid configuration, or malformed input text.
   */
  CFL_STATUS_CONFIG = 2,
  /**
   * No leader or route can serve some cluster.
   */
  CFL_STATUS_INFEASIBLE = 3,
  /**
   * Arguments outside the mathematical domain of the call.
   */
  CFL_STATUS_DOMAIN = 4,
  /**
   * Authentication failure or an unsupported key.
   */
  CFL_STATUS_CRYPTO = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  CFL_STATUS_PANIC = 6,
  /**
   * Any other simulation error.
   */
  CFL_STATUS_INTERNAL = 7,
} CflStatus;

/**
 * Opaque simulation handle.
 */
typedef struct CflSimulation CflSimulation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next call into the library from the same thread.
 */
const char *cfl_last_error_message(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library and not yet freed.
 */
void cfl_string_free(char *s);

/**
 * Builds scenario, data and keys from an experiment config in JSON.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum CflStatus cfl_sim_new_from_json(const char *json, struct CflSimulation **out);

/**
 * # Safety
 * `sim` must be NULL or a handle from [`cfl_sim_new_from_json`] not yet freed.
 */
void cfl_sim_free(struct CflSimulation *sim);

/**
 * Runs one round of local training and masked aggregation.
 *
 * # Safety
 * `sim` must be a live handle.
 */
enum CflStatus cfl_sim_run_round(struct CflSimulation *sim);

/**
 * Rounds completed so far.
 *
 * # Safety
 * `sim` must be a live handle; `out` must be writable.
 */
enum CflStatus cfl_sim_round(const struct CflSimulation *sim, uint64_t *out);

/**
 * Copies the global model into `buf`. `len` receives the dimension; when
 * `capacity` is too small nothing is copied and `Domain` is returned.
 *
 * # Safety
 * `buf` must hold `capacity` doubles (may be NULL when `capacity` is 0).
 */
enum CflStatus cfl_sim_global_model(const struct CflSimulation *sim,
                                    double *buf,
                                    size_t capacity,
                                    size_t *len);

/**
 * JSON of the most recent round report. Free with [`cfl_string_free`].
 *
 * # Safety
 * `sim` must be a live handle; `out` must be writable.
 */
enum CflStatus cfl_report_json(const struct CflSimulation *sim, char **out);

/**
 * Key-ring size for a cluster of `n` at connectivity target `p_c`.
 *
 * # Safety
 * `out` must be writable.
 */
enum CflStatus cfl_ring_size(size_t n, double p_c, size_t *out);

/**
 * # Safety
 * `out` must be writable.
 */
enum CflStatus cfl_edge_probability(size_t n, double p_c, double *out);

/**
 * Derives a 16-byte AE key from `seed`.
 *
 * # Safety
 * `key_out` must hold 16 bytes.
 */
enum CflStatus cfl_ae_keygen(uint32_t kappa_bits, uint64_t seed, uint8_t *key_out);

/**
 * Seals `msg` for the link `(a, b)` and returns the envelope as JSON.
 * Nonce uniqueness across calls is the caller's responsibility.
 *
 * # Safety
 * `key` must hold 16 bytes, `msg` `msg_len` bytes (NULL allowed when 0).
 */
enum CflStatus cfl_ae_seal(const uint8_t *key,
                           const uint8_t *msg,
                           size_t msg_len,
                           uint64_t round,
                           uint32_t step,
                           uint32_t counter,
                           uint32_t a,
                           uint32_t b,
                           char **envelope_json);

/**
 * Opens an envelope from [`cfl_ae_seal`]. `msg_len` receives the payload
 * length; if `capacity` is smaller nothing is copied and `Domain` is
 * returned. Any tampering yields `Crypto`.
 *
 * # Safety
 * `key` must hold 16 bytes, `buf` `capacity` bytes (NULL allowed when 0).
 */
enum CflStatus cfl_ae_open(const uint8_t *key,
                           const char *envelope_json,
                           uint8_t *buf,
                           size_t capacity,
                           size_t *msg_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CFL_H */
