/* C interface of the mfsde library. */

#pragma once

/* Generated with cbindgen:0.27.0 */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible call.
typedef enum MfStatus {
  MF_STATUS_OK = 0,
  MF_STATUS_NULL_POINTER = 1,
  MF_STATUS_INVALID_ARGUMENT = 2,
  MF_STATUS_NUMERICAL_FAILURE = 3,
  MF_STATUS_NOT_CONVERGED = 4,
  MF_STATUS_ESTIMATOR_UNDEFINED = 5,
} MfStatus;

// Solved eigensystem handle.
typedef struct MfEigenSystem MfEigenSystem;

// Model handle: confining and interaction potentials plus the diffusion.
typedef struct MfSystem MfSystem;

// Message describing the most recent failure on this thread.
//
// The pointer stays valid until the next failing call from the same thread.
const char *mf_last_error(void);

// Library version as a static NUL-terminated string.
const char *mf_version(void);

// Creates a model with a polynomial confining potential
// `V(x) = sum_i params[i] * scales[i] * x^exponents[i]`, the quadratic
// interaction with strength `kappa`, and diffusion `sigma`.
//
// Returns null on invalid input (see [`mf_last_error`]).
//
// # Safety
// The three array pointers must reference `n_terms` readable elements.
struct MfSystem *mf_system_new(const double *scales,
                               const uint32_t *exponents,
                               const double *params,
                               size_t n_terms,
                               double kappa,
                               double sigma);

// Releases a model handle; accepts null.
//
// # Safety
// `sys` must come from [`mf_system_new`] and not be used afterwards.
void mf_system_free(struct MfSystem *sys);

// Simulates the interacting ensemble and writes the observations of one
// particle, subsampled at `delta`, into `out` (length `m_observations + 1`).
//
// # Safety
// `sys` must be a live handle; `out` must have space for
// `m_observations + 1` values.
enum MfStatus mf_simulate_particle(const struct MfSystem *sys,
                                   size_t n_particles,
                                   size_t m_observations,
                                   double delta,
                                   double h,
                                   double initial_value,
                                   uint64_t seed,
                                   size_t particle,
                                   double *out);

// Closed-form spectral estimate of the interaction strength for the
// quadratic model (`J = 1`, `psi_1 = x`).
//
// # Safety
// `xs` must reference `len` readable values; `out` must be writable.
enum MfStatus mf_closed_form_ou(const double *xs, size_t len, double delta, double *out);

// Discretized maximum-likelihood estimate of the interaction strength.
//
// # Safety
// `xs` must reference `len` readable values; `out` must be writable.
enum MfStatus mf_mle_ou(const double *xs, size_t len, double delta, double *out);

// Raw moment of the stationary density of the model (self-consistent mean).
//
// # Safety
// `sys` must be a live handle; `out` must be writable.
enum MfStatus mf_stationary_moment(const struct MfSystem *sys, uint32_t order, double *out);

// Solves the eigenproblem of the linearized generator; returns null on
// failure.
//
// # Safety
// `sys` must be a live handle.
struct MfEigenSystem *mf_eigensystem_new(const struct MfSystem *sys,
                                         size_t basis_degree,
                                         size_t n_eigen);

// Releases an eigensystem handle; accepts null.
//
// # Safety
// `eig` must come from [`mf_eigensystem_new`] and not be used afterwards.
void mf_eigensystem_free(struct MfEigenSystem *eig);

// Eigenvalue `lambda_j` (1-based `j`).
//
// # Safety
// `eig` must be a live handle; `out` must be writable.
enum MfStatus mf_eigen_lambda(const struct MfEigenSystem *eig, size_t j, double *out);

// Evaluates the eigenfunction `phi_j` at `x` (1-based `j`).
//
// # Safety
// `eig` must be a live handle; `out` must be writable.
enum MfStatus mf_eigen_eval(const struct MfEigenSystem *eig, size_t j, double x, double *out);

// Newton estimate of the interaction strength from one observation series
// (`J = 1`, `psi_1 = x`), searching the box `[kappa_lo, kappa_hi]`.
//
// # Safety
// `xs` must reference `len` readable values; output pointers must be
// writable (a null `iterations_out` is allowed).
enum MfStatus mf_estimate_kappa(const struct MfSystem *sys,
                                const double *xs,
                                size_t len,
                                double delta,
                                double kappa_init,
                                double kappa_lo,
                                double kappa_hi,
                                size_t basis_degree,
                                double *kappa_out,
                                uint32_t *iterations_out);
