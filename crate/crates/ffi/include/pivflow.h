#ifndef PIVFLOW_H
#define PIVFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define PIV_DATA_SPARSE_SSD 0

#define PIV_DATA_SPARSE_NCC 1

#define PIV_DATA_DENSE_SSD 2

#define PIV_REG_QR 0

#define PIV_REG_QRD_INF 1

#define PIV_REG_QRD_ALPHA 2

typedef enum {
  PIV_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  PIV_STATUS_NULL_POINTER = 1,
  PIV_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Malformed or unknown configuration key.
   */
  PIV_STATUS_CONFIG = 3,
  PIV_STATUS_NUMERIC = 4,
  PIV_STATUS_IO = 5,
  /**
   * The library panicked; the handle arguments should be considered lost.
   */
  PIV_STATUS_INTERNAL = 6,
} PivStatus;

/**
 * Displacement vectors on a strided grid, x fastest.
 */
typedef struct PivFlow PivFlow;

/**
 * Particle positions (voxels) and intensities.
 */
typedef struct PivParticles PivParticles;

/**
 * Solver settings. Fill with `piv_flow_options_default` and change fields.
 */
typedef struct {
  /**
   * One of `PIV_DATA_*`.
   */
  int32_t data;
  /**
   * One of `PIV_REG_*`.
   */
  int32_t regularizer;
  /**
   * Only read for `PIV_REG_QRD_ALPHA`.
   */
  double alpha;
  double lambda;
  size_t stride;
  size_t pyramid_levels;
  double pyramid_factor;
  size_t warps_per_level;
  size_t inner_iterations;
  /**
   * Dense window side (odd); only read for `PIV_DATA_DENSE_SSD`.
   */
  size_t window;
  /**
   * Blob width for rendering volumes in the dense path.
   */
  double sigma;
} PivFlowOptions;

typedef struct {
  size_t truth_count;
  size_t reconstructed_count;
  size_t undetected;
  double undetected_fraction;
  size_t ghosts;
  double ghost_fraction;
  double avg_position_error;
} PivReconStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call into the library from this thread.
 */
const char *piv_last_error(void);

/**
 * Build a particle set from `n` rows of `x, y, z, intensity`.
 *
 * # Safety
 * `rows` must point to `4 * n` doubles (may be null when `n == 0`); `out`
 * must be writable.
 */
PivStatus piv_particles_new(const double *rows, size_t n, PivParticles **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
PivStatus piv_particles_read_csv(const char *path, PivParticles **out);

/**
 * # Safety
 * `h` must be null or a live handle.
 */
size_t piv_particles_len(const PivParticles *h);

/**
 * Copy particle `i` into `row` as `x, y, z, intensity`.
 *
 * # Safety
 * `h` must be a live handle and `row` must hold 4 doubles.
 */
PivStatus piv_particles_get(const PivParticles *h, size_t i, double *row);

/**
 * # Safety
 * `h` must be null or a handle not freed before.
 */
void piv_particles_free(PivParticles *h);

/**
 * Number of values in one descriptor.
 */
size_t piv_descriptor_len(void);

/**
 * Descriptor of `particles` around `center`, with all radii divided by
 * `scale` (1 for the base size).
 *
 * # Safety
 * `center` must hold 3 doubles and `out` `out_len` doubles.
 */
PivStatus piv_descriptor_eval(const PivParticles *particles,
                              const double *center,
                              double scale,
                              double *out,
                              size_t out_len);

/**
 * Library defaults: sparse SSD data term, divergence-free regularizer.
 *
 * # Safety
 * `out` must be writable.
 */
PivStatus piv_flow_options_default(PivFlowOptions *out);

/**
 * Estimate the displacement from `t0` to `t1` inside a domain of
 * `extents` voxels.
 *
 * # Safety
 * Handles must be live, `extents` must hold 3 values, `out` must be writable.
 */
PivStatus piv_flow_solve(const PivParticles *t0,
                         const PivParticles *t1,
                         const size_t *extents,
                         const PivFlowOptions *options,
                         PivFlow **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
PivStatus piv_flow_read(const char *path, PivFlow **out);

/**
 * # Safety
 * `h` must be a live handle; `path` a NUL-terminated string.
 */
PivStatus piv_flow_write(const PivFlow *h, const char *path);

/**
 * Grid size in `dims[0..3]` and the grid spacing in voxels in `stride`.
 *
 * # Safety
 * `h` must be a live handle; `dims` must hold 3 values; `stride` writable.
 */
PivStatus piv_flow_shape(const PivFlow *h, size_t *dims, size_t *stride);

/**
 * Copy the vectors as `3 * prod(dims)` doubles, x fastest.
 *
 * # Safety
 * `h` must be a live handle; `out` must hold `out_len` doubles.
 */
PivStatus piv_flow_vectors(const PivFlow *h, double *out, size_t out_len);

/**
 * # Safety
 * `h` must be null or a handle not freed before.
 */
void piv_flow_free(PivFlow *h);

/**
 * Average endpoint error between two fields of equal shape.
 *
 * # Safety
 * Handles must be live; `out` writable.
 */
PivStatus piv_flow_aee(const PivFlow *estimated, const PivFlow *truth, double *out);

/**
 * Greedy one-to-one matching within `radius` voxels.
 *
 * # Safety
 * Handles must be live; `out` writable.
 */
PivStatus piv_match_particles(const PivParticles *reconstructed,
                              const PivParticles *truth,
                              double radius,
                              PivReconStats *out);

/**
 * Run every stage for the config file at `config_path`. On success
 * `*summary_json` (if `summary_json` is not null) receives the summary,
 * to be released with `piv_string_free`.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string; `summary_json` null or
 * writable.
 */
PivStatus piv_run_pipeline(const char *config_path, char **summary_json);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not freed before.
 */
void piv_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PIVFLOW_H */
