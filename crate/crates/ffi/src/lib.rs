//! C ABI for the mfsde library.
//!
//! Handles are opaque pointers created and destroyed here; every fallible
//! call returns an [`MfStatus`] code and stores a message retrievable with
//! [`mf_last_error`] on the calling thread. Array arguments are borrowed for
//! the duration of the call only.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::ptr;

use mfsde::estimator::{
    closed_form_ou, solve, EstimatingContext, MomentSource, PsiSpec, SolveOptions,
};
use mfsde::invariant::{build_density, DensityOptions, MomentClosure};
use mfsde::potentials::{
    BasisTerm, ConfiningPotential, InteractionPotential, SystemSpec, ThetaVector,
};
use mfsde::simulator::{
    simulate_ensemble_strided, subsample, ObservationSeries, SimConfig,
};
use mfsde::spectral::{build_eigensystem, eval_eigenfunction, EigenSystem, SpectralOptions};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NumericalFailure = 3,
    NotConverged = 4,
    EstimatorUndefined = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(status: MfStatus, msg: &str) -> MfStatus {
    set_error(msg);
    status
}

fn status_of(err: &mfsde::Error) -> MfStatus {
    match err {
        mfsde::Error::InvalidPotential(_) | mfsde::Error::InvalidConfig(_) => {
            MfStatus::InvalidArgument
        }
        mfsde::Error::EstimatorUndefined(_) => MfStatus::EstimatorUndefined,
        mfsde::Error::SolverFailed(_) | mfsde::Error::AllParticlesFailed => {
            MfStatus::NotConverged
        }
        _ => MfStatus::NumericalFailure,
    }
}

/// Model handle: confining and interaction potentials plus the diffusion.
pub struct MfSystem {
    inner: SystemSpec,
}

/// Solved eigensystem handle.
pub struct MfEigenSystem {
    inner: EigenSystem,
}

/// Message describing the most recent failure on this thread.
///
/// The pointer stays valid until the next failing call from the same thread.
#[no_mangle]
pub extern "C" fn mf_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Creates a model with a polynomial confining potential
/// `V(x) = sum_i params[i] * scales[i] * x^exponents[i]`, the quadratic
/// interaction with strength `kappa`, and diffusion `sigma`.
///
/// Returns null on invalid input (see [`mf_last_error`]).
///
/// # Safety
/// The three array pointers must reference `n_terms` readable elements.
#[no_mangle]
pub unsafe extern "C" fn mf_system_new(
    scales: *const f64,
    exponents: *const u32,
    params: *const f64,
    n_terms: usize,
    kappa: f64,
    sigma: f64,
) -> *mut MfSystem {
    if scales.is_null() || exponents.is_null() || params.is_null() {
        set_error("null potential description");
        return ptr::null_mut();
    }
    let scales = std::slice::from_raw_parts(scales, n_terms);
    let exponents = std::slice::from_raw_parts(exponents, n_terms);
    let params = std::slice::from_raw_parts(params, n_terms);
    let terms: Vec<BasisTerm> = scales
        .iter()
        .zip(exponents)
        .map(|(&s, &e)| BasisTerm::new(s, e))
        .collect();
    let build = ConfiningPotential::new(terms, params.to_vec()).and_then(|confining| {
        SystemSpec::new(confining, InteractionPotential::quadratic(kappa), sigma)
    });
    match build {
        Ok(inner) => Box::into_raw(Box::new(MfSystem { inner })),
        Err(e) => {
            set_error(&e.to_string());
            ptr::null_mut()
        }
    }
}

/// Releases a model handle; accepts null.
///
/// # Safety
/// `sys` must come from [`mf_system_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mf_system_free(sys: *mut MfSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// Simulates the interacting ensemble and writes the observations of one
/// particle, subsampled at `delta`, into `out` (length `m_observations + 1`).
///
/// # Safety
/// `sys` must be a live handle; `out` must have space for
/// `m_observations + 1` values.
#[no_mangle]
pub unsafe extern "C" fn mf_simulate_particle(
    sys: *const MfSystem,
    n_particles: usize,
    m_observations: usize,
    delta: f64,
    h: f64,
    initial_value: f64,
    seed: u64,
    particle: usize,
    out: *mut f64,
) -> MfStatus {
    let Some(system) = sys.as_ref() else {
        return fail(MfStatus::NullPointer, "null system handle");
    };
    if out.is_null() {
        return fail(MfStatus::NullPointer, "null output buffer");
    }
    if m_observations == 0 || !(delta > 0.0) || !(h > 0.0) {
        return fail(MfStatus::InvalidArgument, "need m >= 1, delta > 0, h > 0");
    }
    let stride = (delta / h).round();
    if stride < 1.0 || (delta / h - stride).abs() > 1e-9 * stride {
        return fail(
            MfStatus::InvalidArgument,
            "delta must be an integer multiple of h",
        );
    }
    let cfg = SimConfig {
        n_particles,
        t_final: m_observations as f64 * delta,
        h,
        sigma: system.inner.sigma,
        seed,
        initial_value,
    };
    let run = simulate_ensemble_strided(
        &cfg,
        &system.inner.confining,
        &system.inner.interaction,
        stride as usize,
    )
    .and_then(|path| subsample(&path, delta, particle));
    match run {
        Ok(obs) => {
            let dst = std::slice::from_raw_parts_mut(out, m_observations + 1);
            dst.copy_from_slice(obs.samples());
            MfStatus::Ok
        }
        Err(e) => fail(status_of(&e), &e.to_string()),
    }
}

unsafe fn series_from_raw(
    xs: *const f64,
    len: usize,
    delta: f64,
) -> Result<ObservationSeries, MfStatus> {
    if xs.is_null() {
        set_error("null observation array");
        return Err(MfStatus::NullPointer);
    }
    if len < 2 {
        set_error("need at least two observations");
        return Err(MfStatus::InvalidArgument);
    }
    ObservationSeries::from_samples(std::slice::from_raw_parts(xs, len).to_vec(), delta, 0)
        .map_err(|e| {
            set_error(&e.to_string());
            MfStatus::InvalidArgument
        })
}

/// Closed-form spectral estimate of the interaction strength for the
/// quadratic model (`J = 1`, `psi_1 = x`).
///
/// # Safety
/// `xs` must reference `len` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_closed_form_ou(
    xs: *const f64,
    len: usize,
    delta: f64,
    out: *mut f64,
) -> MfStatus {
    if out.is_null() {
        return fail(MfStatus::NullPointer, "null output");
    }
    let obs = match series_from_raw(xs, len, delta) {
        Ok(o) => o,
        Err(s) => return s,
    };
    match closed_form_ou(&obs) {
        Ok(k) => {
            *out = k;
            MfStatus::Ok
        }
        Err(e) => fail(status_of(&e), &e.to_string()),
    }
}

/// Discretized maximum-likelihood estimate of the interaction strength.
///
/// # Safety
/// `xs` must reference `len` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_mle_ou(
    xs: *const f64,
    len: usize,
    delta: f64,
    out: *mut f64,
) -> MfStatus {
    if out.is_null() {
        return fail(MfStatus::NullPointer, "null output");
    }
    let obs = match series_from_raw(xs, len, delta) {
        Ok(o) => o,
        Err(s) => return s,
    };
    match mfsde::baselines::mle_ou(&obs) {
        Ok(rep) => {
            *out = rep.kappa_hat;
            MfStatus::Ok
        }
        Err(e) => fail(status_of(&e), &e.to_string()),
    }
}

/// Raw moment of the stationary density of the model (self-consistent mean).
///
/// # Safety
/// `sys` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_stationary_moment(
    sys: *const MfSystem,
    order: u32,
    out: *mut f64,
) -> MfStatus {
    let Some(system) = sys.as_ref() else {
        return fail(MfStatus::NullPointer, "null system handle");
    };
    if out.is_null() {
        return fail(MfStatus::NullPointer, "null output");
    }
    match build_density(
        &system.inner,
        &MomentClosure::SelfConsistent { m0: 0.0 },
        &DensityOptions::default(),
    ) {
        Ok(rho) => {
            *out = rho.moment(order as usize);
            MfStatus::Ok
        }
        Err(e) => fail(status_of(&e), &e.to_string()),
    }
}

/// Solves the eigenproblem of the linearized generator; returns null on
/// failure.
///
/// # Safety
/// `sys` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mf_eigensystem_new(
    sys: *const MfSystem,
    basis_degree: usize,
    n_eigen: usize,
) -> *mut MfEigenSystem {
    let Some(system) = sys.as_ref() else {
        set_error("null system handle");
        return ptr::null_mut();
    };
    let opts = SpectralOptions {
        basis_degree,
        n_eigen,
    };
    match build_eigensystem(
        &system.inner,
        &MomentClosure::SelfConsistent { m0: 0.0 },
        &DensityOptions::default(),
        &opts,
    ) {
        Ok(inner) => Box::into_raw(Box::new(MfEigenSystem { inner })),
        Err(e) => {
            set_error(&e.to_string());
            ptr::null_mut()
        }
    }
}

/// Releases an eigensystem handle; accepts null.
///
/// # Safety
/// `eig` must come from [`mf_eigensystem_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mf_eigensystem_free(eig: *mut MfEigenSystem) {
    if !eig.is_null() {
        drop(Box::from_raw(eig));
    }
}

/// Eigenvalue `lambda_j` (1-based `j`).
///
/// # Safety
/// `eig` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_eigen_lambda(
    eig: *const MfEigenSystem,
    j: usize,
    out: *mut f64,
) -> MfStatus {
    let Some(handle) = eig.as_ref() else {
        return fail(MfStatus::NullPointer, "null eigensystem handle");
    };
    if out.is_null() {
        return fail(MfStatus::NullPointer, "null output");
    }
    match handle.inner.lambda(j) {
        Ok(l) => {
            *out = l;
            MfStatus::Ok
        }
        Err(e) => fail(MfStatus::InvalidArgument, &e.to_string()),
    }
}

/// Evaluates the eigenfunction `phi_j` at `x` (1-based `j`).
///
/// # Safety
/// `eig` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_eigen_eval(
    eig: *const MfEigenSystem,
    j: usize,
    x: f64,
    out: *mut f64,
) -> MfStatus {
    let Some(handle) = eig.as_ref() else {
        return fail(MfStatus::NullPointer, "null eigensystem handle");
    };
    if out.is_null() {
        return fail(MfStatus::NullPointer, "null output");
    }
    match eval_eigenfunction(&handle.inner, j, x) {
        Ok(v) => {
            *out = v;
            MfStatus::Ok
        }
        Err(e) => fail(MfStatus::InvalidArgument, &e.to_string()),
    }
}

/// Newton estimate of the interaction strength from one observation series
/// (`J = 1`, `psi_1 = x`), searching the box `[kappa_lo, kappa_hi]`.
///
/// # Safety
/// `xs` must reference `len` readable values; output pointers must be
/// writable (a null `iterations_out` is allowed).
#[no_mangle]
pub unsafe extern "C" fn mf_estimate_kappa(
    sys: *const MfSystem,
    xs: *const f64,
    len: usize,
    delta: f64,
    kappa_init: f64,
    kappa_lo: f64,
    kappa_hi: f64,
    basis_degree: usize,
    kappa_out: *mut f64,
    iterations_out: *mut u32,
) -> MfStatus {
    let Some(system) = sys.as_ref() else {
        return fail(MfStatus::NullPointer, "null system handle");
    };
    if kappa_out.is_null() {
        return fail(MfStatus::NullPointer, "null output");
    }
    let obs = match series_from_raw(xs, len, delta) {
        Ok(o) => o,
        Err(s) => return s,
    };
    let shape = match ThetaVector::new(vec![], vec![kappa_init], None) {
        Ok(s) => s,
        Err(e) => return fail(MfStatus::InvalidArgument, &e.to_string()),
    };
    let ctx = match EstimatingContext::new(
        system.inner.clone(),
        shape.clone(),
        PsiSpec::monomial(1),
        delta,
        MomentSource::SelfConsistent { m0: 0.0 },
        DensityOptions::default(),
        SpectralOptions {
            basis_degree,
            n_eigen: 1,
        },
    ) {
        Ok(c) => c,
        Err(e) => return fail(MfStatus::InvalidArgument, &e.to_string()),
    };
    let opts = SolveOptions::with_box(vec![(kappa_lo, kappa_hi)]);
    match solve(&ctx, &obs, &shape, &opts) {
        Ok(rep) => {
            *kappa_out = rep.theta_hat.kappa[0];
            if !iterations_out.is_null() {
                *iterations_out = rep.iterations as u32;
            }
            if rep.converged {
                MfStatus::Ok
            } else {
                fail(
                    MfStatus::NotConverged,
                    "root solve stalled before reaching the tolerance",
                )
            }
        }
        Err(e) => fail(status_of(&e), &e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_system(kappa: f64, sigma: f64) -> *mut MfSystem {
        let scales = [0.5];
        let exponents = [2u32];
        let params = [1.0];
        unsafe {
            mf_system_new(
                scales.as_ptr(),
                exponents.as_ptr(),
                params.as_ptr(),
                1,
                kappa,
                sigma,
            )
        }
    }

    #[test]
    fn version_is_a_c_string() {
        let v = unsafe { std::ffi::CStr::from_ptr(mf_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn invalid_system_sets_the_error_message() {
        let sys = unsafe {
            mf_system_new(ptr::null(), ptr::null(), ptr::null(), 0, 0.5, 1.0)
        };
        assert!(sys.is_null());
        let msg = unsafe { std::ffi::CStr::from_ptr(mf_last_error()) };
        assert!(!msg.to_bytes().is_empty());
    }

    #[test]
    fn eigen_roundtrip_through_the_c_surface() {
        let sys = quadratic_system(0.5, 1.0);
        assert!(!sys.is_null());
        let eig = unsafe { mf_eigensystem_new(sys, 30, 2) };
        assert!(!eig.is_null());
        let mut l1 = 0.0;
        let mut l2 = 0.0;
        unsafe {
            assert_eq!(mf_eigen_lambda(eig, 1, &mut l1), MfStatus::Ok);
            assert_eq!(mf_eigen_lambda(eig, 2, &mut l2), MfStatus::Ok);
        }
        assert!((l1 - 1.5).abs() < 1.5e-8);
        assert!((l2 - 3.0).abs() < 3.0e-8);
        let mut bad = 0.0;
        unsafe {
            assert_eq!(
                mf_eigen_lambda(eig, 7, &mut bad),
                MfStatus::InvalidArgument
            );
            let mut phi2 = 0.0;
            let root = (2.0f64 / 3.0).sqrt();
            assert_eq!(mf_eigen_eval(eig, 2, root, &mut phi2), MfStatus::Ok);
            assert!(phi2.abs() < 1e-8);
            mf_eigensystem_free(eig);
            mf_system_free(sys);
        }
    }

    #[test]
    fn simulate_estimate_roundtrip() {
        let sys = quadratic_system(0.5, 1.0);
        let m = 600usize;
        let mut xs = vec![0.0; m + 1];
        let status = unsafe {
            mf_simulate_particle(sys, 64, m, 1.0, 0.01, 0.0, 99, 0, xs.as_mut_ptr())
        };
        assert_eq!(status, MfStatus::Ok);
        assert_eq!(xs[0], 0.0);
        assert!(xs.iter().all(|v| v.is_finite()));

        let mut cf = 0.0;
        let mut mle = 0.0;
        unsafe {
            assert_eq!(
                mf_closed_form_ou(xs.as_ptr(), xs.len(), 1.0, &mut cf),
                MfStatus::Ok
            );
            assert_eq!(mf_mle_ou(xs.as_ptr(), xs.len(), 1.0, &mut mle), MfStatus::Ok);
        }
        assert!((cf - 0.5).abs() < 0.5, "closed form {cf}");
        assert!(cf >= mle - 1e-12);

        let mut newton = 0.0;
        let mut iters = 0u32;
        let status = unsafe {
            mf_estimate_kappa(
                sys,
                xs.as_ptr(),
                xs.len(),
                1.0,
                0.25,
                -0.9,
                2.0,
                16,
                &mut newton,
                &mut iters,
            )
        };
        assert_eq!(status, MfStatus::Ok);
        assert!((newton - cf).abs() < 1e-6, "newton {newton} vs cf {cf}");

        let mut moment = 0.0;
        unsafe {
            assert_eq!(mf_stationary_moment(sys, 2, &mut moment), MfStatus::Ok);
            mf_system_free(sys);
        }
        assert!((moment - 2.0 / 3.0).abs() < 1e-8);
    }

    #[test]
    fn undefined_estimator_reports_the_right_status() {
        let xs = [1.0, -1.0];
        let mut out = 0.0;
        let status = unsafe { mf_closed_form_ou(xs.as_ptr(), 2, 1.0, &mut out) };
        assert_eq!(status, MfStatus::EstimatorUndefined);
    }
}
