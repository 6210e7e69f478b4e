#ifndef RMT_EQUIV_H
#define RMT_EQUIV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result of every call.
typedef enum RmtStatus {
  RMT_STATUS_OK = 0,
  // Bad model, argument or config.
  RMT_STATUS_INVALID_INPUT = 1,
  // Non-convergence, domain escape, singular system and the like.
  RMT_STATUS_NUMERICAL = 2,
  RMT_STATUS_IO = 3,
  RMT_STATUS_NULL_POINTER = 4,
  // Output buffer shorter than required.
  RMT_STATUS_BUFFER_TOO_SMALL = 5,
  // A Rust panic was caught at the boundary.
  RMT_STATUS_PANIC = 6,
} RmtStatus;

// Deterministic-equivalent handle.
typedef struct RmtEquivalent RmtEquivalent;

// Model handle.
typedef struct RmtModel RmtModel;

// Regression-prediction handle.
typedef struct RmtPrediction RmtPrediction;

typedef struct RmtValidation {
  double top_eigenvalue;
  double margin_limit;
  double min_trace;
  bool margin_ok;
  bool trace_ok;
} RmtValidation;

// Scalar callback for [`rmt_gauss_expect`].
typedef double (*RmtScalarFn)(double x, void *ctx);

// Library version as a static NUL-terminated string.
const char *rmt_version(void);

// Copies the calling thread's last error message into `buf` (truncated,
// always NUL-terminated when `len > 0`). Returns the full length in bytes
// including the NUL.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t rmt_last_error(char *buf, size_t len);

// Parses a JSON model document.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum RmtStatus rmt_model_from_json(const char *json, struct RmtModel **out);

// Loads a JSON model file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum RmtStatus rmt_model_load(const char *path, struct RmtModel **out);

// # Safety
// `model` must be null or a handle from this library, freed once.
void rmt_model_free(struct RmtModel *model);

// # Safety
// Pointers must be valid.
enum RmtStatus rmt_model_dims(const struct RmtModel *model, size_t *p, size_t *n);

// # Safety
// Pointers must be valid.
enum RmtStatus rmt_model_validate(const struct RmtModel *model, struct RmtValidation *out);

// Draws the `p × n` sample for `seed` into `out` (column-major, `len ≥ p·n`).
//
// # Safety
// `out` must be valid for `len` doubles.
enum RmtStatus rmt_model_sample(const struct RmtModel *model,
                                uint64_t seed,
                                double *out,
                                size_t len);

// Solves for `Λ^z` and builds the deterministic equivalent. `tol ≤ 0`
// selects the default tolerance.
//
// # Safety
// Pointers must be valid.
enum RmtStatus rmt_equivalent_compute(const struct RmtModel *model,
                                      double z_re,
                                      double z_im,
                                      double tol,
                                      struct RmtEquivalent **out);

// # Safety
// `eq` must be null or a handle from this library, freed once.
void rmt_equivalent_free(struct RmtEquivalent *eq);

// Stieltjes value `m(z) = −(1/p) tr Q̃`.
//
// # Safety
// Pointers must be valid.
enum RmtStatus rmt_equivalent_stieltjes(const struct RmtEquivalent *eq, double *re, double *im);

// Iterations and final residual of the fixed-point solve.
//
// # Safety
// Pointers must be valid.
enum RmtStatus rmt_equivalent_diagnostics(const struct RmtEquivalent *eq,
                                          size_t *iterations,
                                          double *residual);

// Copies the `n` entries of `Λ^z` into `re`/`im`.
//
// # Safety
// `re` and `im` must be valid for `len` doubles.
enum RmtStatus rmt_equivalent_lambda(const struct RmtEquivalent *eq,
                                     double *re,
                                     double *im,
                                     size_t len);

// Copies `Q̃^z` (`p × p`, column-major) into `re`/`im`.
//
// # Safety
// `re` and `im` must be valid for `len` doubles.
enum RmtStatus rmt_equivalent_tilde_q(const struct RmtEquivalent *eq,
                                      double *re,
                                      double *im,
                                      size_t len);

// Density `Im m(x + iη)/π` at each grid point.
//
// # Safety
// `grid` and `out` must be valid for `len` doubles.
enum RmtStatus rmt_spectral_density(const struct RmtModel *model,
                                    const double *grid,
                                    size_t len,
                                    double eta,
                                    double *out);

// `ζ` solving `z = v + Δ·f(z)` for the logistic map `f(t) = 1/(λ(1 + eᵗ))`,
// with `ζ'`.
//
// # Safety
// Pointers must be valid.
enum RmtStatus rmt_zeta_logistic(double v, double delta, double lambda, double *z, double *dz);

// `E[f(mu + √var·ξ)]`, `ξ ~ N(0, 1)`, with an `nodes`-point Gauss–Hermite
// rule. `var = 0` evaluates `f(mu)`.
//
// # Safety
// `f` is called with `ctx` from the calling thread; `out` must be valid.
enum RmtStatus rmt_gauss_expect(RmtScalarFn f,
                                void *ctx,
                                double mu,
                                double var,
                                size_t nodes,
                                double *out);

// Predicted statistics of the regression fixed point with logistic loss.
// `tol ≤ 0` and `nodes = 0` select the defaults.
//
// # Safety
// Pointers must be valid.
enum RmtStatus rmt_predict_logistic(const struct RmtModel *model,
                                    double lambda,
                                    double tol,
                                    size_t nodes,
                                    struct RmtPrediction **out);

// # Safety
// `pred` must be null or a handle from this library, freed once.
void rmt_prediction_free(struct RmtPrediction *pred);

// Dimension `p` and number of data `n`.
//
// # Safety
// Pointers must be valid.
enum RmtStatus rmt_prediction_dims(const struct RmtPrediction *pred, size_t *p, size_t *n);

// Copies `m_Y` (length `p`).
//
// # Safety
// `out` must be valid for `len` doubles.
enum RmtStatus rmt_prediction_mean(const struct RmtPrediction *pred, double *out, size_t len);

// Copies `C_Y` (`p × p`, column-major).
//
// # Safety
// `out` must be valid for `len` doubles.
enum RmtStatus rmt_prediction_cov(const struct RmtPrediction *pred, double *out, size_t len);

// Copies the per-datum `μ_i`, `ν_i` and `Δ_i` (length `n` each).
//
// # Safety
// Each output must be valid for `len` doubles.
enum RmtStatus rmt_prediction_data(const struct RmtPrediction *pred,
                                   double *mu,
                                   double *nu,
                                   double *delta,
                                   size_t len);

#endif  /* RMT_EQUIV_H */
