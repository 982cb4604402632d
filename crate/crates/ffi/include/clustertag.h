#ifndef CLUSTERTAG_H
#define CLUSTERTAG_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CtStatus {
  CT_STATUS_OK = 0,
  CT_STATUS_NULL_POINTER = 1,
  CT_STATUS_INVALID_CONFIG = 2,
  /**
   * Allocation request the layout cannot serve.
   */
  CT_STATUS_OUT_OF_RANGE = 3,
  CT_STATUS_DOUBLE_FREE = 4,
  CT_STATUS_INVALID_FREE = 5,
  CT_STATUS_TAG_MISMATCH = 6,
  CT_STATUS_DOMAIN_ERROR = 7,
  CT_STATUS_INTERNAL = 8,
} CtStatus;

typedef enum CtModelKind {
  CT_MODEL_KIND_CLUSTER_TAG = 0,
  CT_MODEL_KIND_RANDOM = 1,
  CT_MODEL_KIND_RANDOM_HEADER = 2,
  CT_MODEL_KIND_STAGGERED = 3,
  CT_MODEL_KIND_FIXED_TEMPORAL = 4,
  CT_MODEL_KIND_STICKY = 5,
} CtModelKind;

typedef enum CtTemporalStrategy {
  CT_TEMPORAL_STRATEGY_CIRCULAR_SHIFT = 0,
  CT_TEMPORAL_STRATEGY_RANDOM = 1,
} CtTemporalStrategy;

/**
 * Opaque allocator handle.
 */
typedef struct CtModel CtModel;

/**
 * Tunables for [`ct_model_new`]. Start from [`ct_config_default`].
 */
typedef struct CtConfig {
  uint32_t density;
  uint32_t quarantine;
  uint32_t tag_bits;
  uint32_t cache_capacity;
  uint64_t scan_period;
  uint64_t page_threshold;
} CtConfig;

typedef struct CtAccess {
  /**
   * Nonzero when the key did not match a lock.
   */
  uint8_t violation;
  uint64_t granule;
  uint8_t key;
  uint8_t lock;
} CtAccess;

typedef struct CtSpatialModel {
  uint64_t min_chunks;
  uint64_t avg_chunks;
  double entropy_bound_bits;
} CtSpatialModel;

/**
 * Summary of a distance sample. `min`, `avg` and `p25` are meaningful only
 * when `samples > 0`.
 */
typedef struct CtDistanceStats {
  uint64_t samples;
  uint64_t min;
  double avg;
  uint64_t p25;
  double entropy_bits;
} CtDistanceStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

struct CtConfig ct_config_default(void);

/**
 * Static, NUL-terminated description of `status`.
 */
const char *ct_status_message(enum CtStatus status);

/**
 * Creates a model. `config` may be null for defaults. On success `*out`
 * owns a handle for [`ct_model_free`].
 *
 * # Safety
 * `config` must be null or valid for reads; `out` must be valid for writes.
 */
enum CtStatus ct_model_new(enum CtModelKind kind,
                           const struct CtConfig *config,
                           uint64_t seed,
                           struct CtModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`ct_model_new`] not yet freed.
 */
void ct_model_free(struct CtModel *model);

/**
 * Allocates `size` bytes; `*out_addr` receives the tagged address.
 *
 * # Safety
 * `model` must be a live handle; `out_addr` must be valid for writes.
 */
enum CtStatus ct_malloc(struct CtModel *model, uint64_t size, uint64_t *out_addr);

/**
 * Frees a tagged address previously returned by [`ct_malloc`].
 *
 * # Safety
 * `model` must be a live handle.
 */
enum CtStatus ct_free(struct CtModel *model, uint64_t addr);

/**
 * Compares the key of `addr` with the lock of every granule in
 * `[addr, addr + len)`.
 *
 * # Safety
 * `model` must be a live handle; `out` must be valid for writes.
 */
enum CtStatus ct_check_access(const struct CtModel *model,
                              uint64_t addr,
                              uint64_t len,
                              struct CtAccess *out);

/**
 * Entropy in bits of a geometric distribution with success `p` in (0, 1].
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum CtStatus ct_geometric_entropy(double p, double *out);

/**
 * Analytic spatial collision profile for cluster density `density >= 1`.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum CtStatus ct_cluster_spatial_model(uint32_t density, struct CtSpatialModel *out);

/**
 * Temporal collision distances over `rounds` simulated reuse rounds.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum CtStatus ct_monte_carlo_temporal(enum CtTemporalStrategy strategy,
                                      uint64_t rounds,
                                      uint64_t seed,
                                      struct CtDistanceStats *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLUSTERTAG_H */
