#ifndef OTARO_H
#define OTARO_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OtaroStatus {
  OTARO_STATUS_OK = 0,
  OTARO_STATUS_NULL_POINTER = 1,
  OTARO_STATUS_INVALID_ARGUMENT = 2,
  OTARO_STATUS_NON_FINITE = 3,
  OTARO_STATUS_EXPONENT_OVERFLOW = 4,
  OTARO_STATUS_BAD_FORMAT = 5,
  OTARO_STATUS_IO = 6,
  OTARO_STATUS_BUFFER_TOO_SMALL = 7,
  OTARO_STATUS_INVALID_STATE = 8,
  OTARO_STATUS_PANIC = 9,
} OtaroStatus;

/**
 * Rounding used when encoding.
 */
typedef enum OtaroRounding {
  OTARO_ROUNDING_TRUNCATE = 0,
  OTARO_ROUNDING_ROUND_HALF_EVEN = 1,
} OtaroRounding;

/**
 * A parsed `.sefp` container.
 */
typedef struct OtaroContainer OtaroContainer;

/**
 * Bandit bit-width scheduler.
 */
typedef struct OtaroScheduler OtaroScheduler;

/**
 * An encoded SEFP tensor.
 */
typedef struct OtaroTensor OtaroTensor;

typedef struct OtaroModelSpec {
  uint64_t parameter_count;
  uint64_t layer_count;
  uint64_t kv_head_count;
  uint64_t head_dim;
  uint64_t context_tokens;
  /**
   * Nonzero keeps the KV cache in fp16 instead of the weight format.
   */
  uint8_t kv_fp16;
} OtaroModelSpec;

typedef struct OtaroMemoryEstimate {
  double bits_per_weight;
  double weight_bytes;
  double kv_bytes;
  double total_bytes;
} OtaroMemoryEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Static description of a status code.
 */
const char *otaro_status_str(enum OtaroStatus status);

/**
 * Copies the calling thread's last error message (NUL-terminated, truncated to `cap`).
 * `needed`, if non-null, receives the full length including the NUL.
 */
enum OtaroStatus otaro_last_error(char *buf, size_t cap, size_t *needed);

/**
 * Encodes `len` values as E`exponent_bits`M`mantissa_bits` in groups of `group_size`.
 */
enum OtaroStatus otaro_quantize(const double *values,
                                size_t len,
                                uint8_t exponent_bits,
                                uint8_t mantissa_bits,
                                size_t group_size,
                                enum OtaroRounding rounding,
                                struct OtaroTensor **out);

/**
 * New tensor holding `tensor` cut to `mantissa_bits`.
 */
enum OtaroStatus otaro_truncate(const struct OtaroTensor *tensor,
                                uint8_t mantissa_bits,
                                struct OtaroTensor **out);

/**
 * Decodes into `out`, which must hold `otaro_tensor_len` values.
 */
enum OtaroStatus otaro_dequantize(const struct OtaroTensor *tensor, double *out, size_t cap);

enum OtaroStatus otaro_tensor_len(const struct OtaroTensor *tensor, size_t *len);

enum OtaroStatus otaro_tensor_mantissa_bits(const struct OtaroTensor *tensor, uint8_t *m);

/**
 * Raw planes: `group_count` biased exponents and `len` mantissas. Either pointer may be null.
 */
enum OtaroStatus otaro_tensor_planes(const struct OtaroTensor *tensor,
                                     uint8_t *exponents,
                                     size_t exponents_cap,
                                     uint16_t *mantissas,
                                     size_t mantissas_cap);

void otaro_tensor_free(struct OtaroTensor *tensor);

/**
 * Writes `count` named tensors (all sharing one width and group size) to `path`.
 */
enum OtaroStatus otaro_container_write(const char *path,
                                       const char *const *names,
                                       const struct OtaroTensor *const *tensors,
                                       size_t count);

enum OtaroStatus otaro_container_read(const char *path, struct OtaroContainer **out);

enum OtaroStatus otaro_container_len(const struct OtaroContainer *c, size_t *len);

/**
 * Copies the name of tensor `index`; see `otaro_last_error` for the buffer convention.
 */
enum OtaroStatus otaro_container_name(const struct OtaroContainer *c,
                                      size_t index,
                                      char *buf,
                                      size_t cap,
                                      size_t *needed);

/**
 * A new handle holding a copy of tensor `index`.
 */
enum OtaroStatus otaro_container_tensor(const struct OtaroContainer *c,
                                        size_t index,
                                        struct OtaroTensor **out);

void otaro_container_free(struct OtaroContainer *c);

/**
 * Weight plus KV-cache bytes. `mantissa_bits == 0` means fp16 storage.
 */
enum OtaroStatus otaro_estimate_memory(const struct OtaroModelSpec *spec,
                                       uint8_t exponent_bits,
                                       uint8_t mantissa_bits,
                                       size_t group_size,
                                       struct OtaroMemoryEstimate *out);

/**
 * Scheduler over E`exponent_bits`M`m_high` down to M`m_low`.
 */
enum OtaroStatus otaro_scheduler_new(uint8_t exponent_bits,
                                     uint8_t m_high,
                                     uint8_t m_low,
                                     double lambda,
                                     struct OtaroScheduler **out);

/**
 * Picks the next width; its mantissa bits go to `mantissa_bits`.
 */
enum OtaroStatus otaro_scheduler_select(struct OtaroScheduler *s, uint8_t *mantissa_bits);

/**
 * Reports the loss observed at the width returned by the last select.
 */
enum OtaroStatus otaro_scheduler_report(struct OtaroScheduler *s,
                                        uint8_t mantissa_bits,
                                        double loss);

/**
 * Selections made so far of the width with `mantissa_bits`.
 */
enum OtaroStatus otaro_scheduler_count(const struct OtaroScheduler *s,
                                       uint8_t mantissa_bits,
                                       uint64_t *count);

void otaro_scheduler_free(struct OtaroScheduler *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OTARO_H */
