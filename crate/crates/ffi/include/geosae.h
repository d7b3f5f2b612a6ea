#ifndef GEOSAE_H
#define GEOSAE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GeosaeStatus {
  GEOSAE_STATUS_OK = 0,
  GEOSAE_STATUS_NULL_POINTER = 1,
  GEOSAE_STATUS_INVALID_INPUT = 2,
  GEOSAE_STATUS_SINGULAR = 3,
  GEOSAE_STATUS_OPTIMIZATION = 4,
  GEOSAE_STATUS_NUMERICAL = 5,
  GEOSAE_STATUS_PANIC = 6,
} GeosaeStatus;

typedef enum GeosaeFamily {
  GEOSAE_FAMILY_MATERN = 0,
  GEOSAE_FAMILY_EXPONENTIAL = 1,
  GEOSAE_FAMILY_SPHERICAL = 2,
} GeosaeFamily;

typedef enum GeosaeRandomEffect {
  GEOSAE_RANDOM_EFFECT_INDEPENDENT = 0,
  GEOSAE_RANDOM_EFFECT_SAR = 1,
} GeosaeRandomEffect;

// Opaque fitted area-level model.
typedef struct GeosaeSfhFit GeosaeSfhFit;

// Opaque variogram model.
typedef struct GeosaeVariogram GeosaeVariogram;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread (empty if none). The
// pointer stays valid until the next failing call on the same thread.
const char *geosae_last_error(void);

// Library version as a static NUL-terminated string.
const char *geosae_version(void);

// Creates a variogram model. `smoothness` is ignored for non-Matérn families.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum GeosaeStatus geosae_variogram_new(enum GeosaeFamily family,
                                       double nugget,
                                       double partial_sill,
                                       double range,
                                       double smoothness,
                                       struct GeosaeVariogram **out);

// # Safety
// `handle` must come from [`geosae_variogram_new`] (or be null).
void geosae_variogram_free(struct GeosaeVariogram *handle);

// Semivariance at lag `h`.
//
// # Safety
// `handle` must be a live variogram handle and `out` writable.
enum GeosaeStatus geosae_variogram_gamma(const struct GeosaeVariogram *handle,
                                         double h,
                                         double *out);

// Local ordinary kriging at `(tx, ty)` from the `q` nearest of `n` data.
//
// # Safety
// `xs`, `ys` and `values` must point to `n` readable doubles; `prediction`
// and `variance` must be writable.
enum GeosaeStatus geosae_point_krige(const struct GeosaeVariogram *model,
                                     const double *xs,
                                     const double *ys,
                                     const double *values,
                                     uintptr_t n,
                                     double tx,
                                     double ty,
                                     uintptr_t q,
                                     double *prediction,
                                     double *variance);

// REML fit of the area-level model. `x` is `m x k` row-major; `w` is the
// `m x m` row-major spatial weight matrix, required for SAR effects and
// ignored otherwise. Coefficient names are `x0, x1, ...`.
//
// # Safety
// Array arguments must point to the stated number of readable doubles and
// `out` must be writable.
enum GeosaeStatus geosae_sfh_fit(const double *y,
                                 const double *x,
                                 const double *v_eps,
                                 uintptr_t m,
                                 uintptr_t k,
                                 const double *w,
                                 enum GeosaeRandomEffect effect,
                                 struct GeosaeSfhFit **out);

// # Safety
// `handle` must come from [`geosae_sfh_fit`] (or be null).
void geosae_sfh_free(struct GeosaeSfhFit *handle);

// Scalar results: variance component, autoregression, restricted
// log-likelihood and whether the variance sits on its boundary (0/1).
// Any output pointer may be null to skip it.
//
// # Safety
// `handle` must be a live fit handle; non-null outputs must be writable.
enum GeosaeStatus geosae_sfh_parameters(const struct GeosaeSfhFit *handle,
                                        double *sigma2_v,
                                        double *rho,
                                        double *loglik,
                                        int32_t *boundary);

// Copies the `k` coefficients (and their GLS standard errors when `se` is
// non-null).
//
// # Safety
// `beta` (and `se`, if non-null) must have room for `k` doubles.
enum GeosaeStatus geosae_sfh_coefficients(const struct GeosaeSfhFit *handle,
                                          double *beta,
                                          double *se,
                                          uintptr_t k);

// Copies the `m` log-scale EBLUPs.
//
// # Safety
// `out` must have room for `m` doubles.
enum GeosaeStatus geosae_sfh_eblups(const struct GeosaeSfhFit *handle, double *out, uintptr_t m);

// `mu = exp(eta + mse/2)` and `tau = N mu`.
//
// # Safety
// `mu` and `tau` must be writable.
enum GeosaeStatus geosae_back_transform(double eblup_log,
                                        double mse_log,
                                        uint64_t population,
                                        double *mu,
                                        double *tau);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEOSAE_H */
