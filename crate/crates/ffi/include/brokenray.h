#ifndef BROKENRAY_H
#define BROKENRAY_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BrtStatus {
  BRT_STATUS_OK = 0,
  BRT_STATUS_NULL_POINTER = 1,
  BRT_STATUS_INVALID_ARGUMENT = 2,
  BRT_STATUS_GEOMETRY = 3,
  BRT_STATUS_TRACE = 4,
  BRT_STATUS_OPERATOR = 5,
  BRT_STATUS_BUFFER_TOO_SMALL = 6,
  BRT_STATUS_PANIC = 7,
} BrtStatus;

typedef enum BrtPreset {
  BRT_PRESET_SQUARE = 0,
  BRT_PRESET_HEXAGON = 1,
  BRT_PRESET_CUBE = 2,
} BrtPreset;

typedef struct BrtDomain BrtDomain;

typedef struct BrtOperator BrtOperator;

/**
 * Outcome of tracing one broken ray.
 */
typedef struct BrtTrace {
  /**
   * 0 ended in E, 1 trapped, 2 near an edge, 3 near the boundary of E,
   * 4 left through the complement of E.
   */
  int32_t status;
  size_t segments;
  double length;
  double end[3];
} BrtTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t brt_last_error(char *buf, size_t len);

/**
 * Builds a preset domain. `measure` lists the facets forming E.
 *
 * # Safety
 * `measure` must point to `n_measure` values; `out` must be writable.
 */
enum BrtStatus brt_domain_preset(enum BrtPreset preset,
                                 const uint32_t *measure,
                                 size_t n_measure,
                                 struct BrtDomain **out);

/**
 * The unit cube with E the slab `|z - 1/2| <= eps` of the x=0 face
 * (`kind` 0) or the cap of the given radius (`kind` 1).
 *
 * # Safety
 * `out` must be writable.
 */
enum BrtStatus brt_domain_cube_variant(int32_t kind, double param, struct BrtDomain **out);

/**
 * Builds a domain from its TOML description.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` must be writable.
 */
enum BrtStatus brt_domain_from_toml(const char *toml, struct BrtDomain **out);

/**
 * # Safety
 * `d` must be null or a handle from a `brt_domain_*` constructor, freed once.
 */
void brt_domain_free(struct BrtDomain *d);

/**
 * Dimension of the domain, 0 for a null handle.
 *
 * # Safety
 * `d` must be null or a live domain handle.
 */
size_t brt_domain_dim(const struct BrtDomain *d);

/**
 * Number of facets, 0 for a null handle.
 *
 * # Safety
 * `d` must be null or a live domain handle.
 */
size_t brt_domain_facet_count(const struct BrtDomain *d);

/**
 * Traces the broken ray leaving `start` (on facet `facet`) along `dir`
 * with at most `n_max` reflections.
 *
 * # Safety
 * `start` and `dir` must point to 3 doubles; `out` must be writable.
 */
enum BrtStatus brt_trace(const struct BrtDomain *d,
                         const double *start,
                         const double *dir,
                         size_t facet,
                         size_t n_max,
                         struct BrtTrace *out);

/**
 * Assembles the discrete transform on a `dims` grid covering the domain,
 * with boundary sampling of `density` nodes per unit length, `directions`
 * direction nodes (`azimuths` more in 3D), constant attenuation `sigma`
 * and the binary cutoff.
 *
 * # Safety
 * `dims` must point to `dim` values; `out` must be writable.
 */
enum BrtStatus brt_operator_new(const struct BrtDomain *d,
                                const size_t *dims,
                                double density,
                                size_t directions,
                                size_t azimuths,
                                size_t n_max,
                                double sigma,
                                struct BrtOperator **out);

/**
 * # Safety
 * `op` must be null or a handle from [`brt_operator_new`], freed once.
 */
void brt_operator_free(struct BrtOperator *op);

/**
 * Number of grid cells (`n_in`) and of sinogram rows (`n_out`).
 *
 * # Safety
 * `op` must be a live handle; `n_in` and `n_out` must be writable.
 */
enum BrtStatus brt_operator_shape(const struct BrtOperator *op, size_t *n_in, size_t *n_out);

/**
 * `y = A f`.
 *
 * # Safety
 * `f` must hold `nf` doubles and `y` room for `ny`.
 */
enum BrtStatus brt_operator_forward(const struct BrtOperator *op,
                                    const double *f,
                                    size_t nf,
                                    double *y,
                                    size_t ny);

/**
 * `f = A* g`, adjoint in the quadrature-weighted inner products.
 *
 * # Safety
 * `g` must hold `ng` doubles and `f` room for `nf`.
 */
enum BrtStatus brt_operator_adjoint(const struct BrtOperator *op,
                                    const double *g,
                                    size_t ng,
                                    double *f,
                                    size_t nf);

/**
 * `y = A* A f`.
 *
 * # Safety
 * `f` must hold `nf` doubles and `y` room for `ny`.
 */
enum BrtStatus brt_operator_normal(const struct BrtOperator *op,
                                   const double *f,
                                   size_t nf,
                                   double *y,
                                   size_t ny);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BROKENRAY_H */
