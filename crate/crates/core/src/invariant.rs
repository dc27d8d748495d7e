//! Stationary density of the mean-field dynamics.
//!
//! The invariant measure has Gibbs form `rho(x) = exp(-(V + W*rho)/sigma)/Z`
//! where the interaction convolution is closed by finitely many raw moments of
//! `rho` itself. Those moments are fixed points of a damped iteration for the
//! self-consistency condition, or supplied directly (e.g. estimated from data).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::potentials::{
    poly_eval, ConfiningPotential, InteractionPotential, SystemSpec,
};
use crate::simulator::ObservationSeries;

/// Grid resolution and fixed-point controls.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DensityOptions {
    /// Number of uniform grid nodes.
    pub nodes: usize,
    /// Damping factor of the moment fixed-point iteration.
    pub damping: f64,
    /// Fixed-point stopping tolerance on the moment update.
    pub fp_tol: f64,
    /// Fixed-point iteration cap.
    pub max_iters: usize,
}

impl Default for DensityOptions {
    fn default() -> Self {
        DensityOptions {
            nodes: 2001,
            damping: 0.5,
            fp_tol: 1e-10,
            max_iters: 500,
        }
    }
}

/// Gridded normalized stationary density with its defining parameters.
#[derive(Debug, Clone, Serialize)]
pub struct StationaryDensity {
    xs: Vec<f64>,
    values: Vec<f64>,
    dx: f64,
    /// Normalization constant of the unnormalized Gibbs factor.
    pub normalizer: f64,
    /// First raw moment used in the interaction term (the mean parameter).
    pub mean_param: f64,
    /// All raw moments the interaction term was closed with (`[0]` is 1).
    pub closure_moments: Vec<f64>,
    /// Parameters the density was built at.
    pub system: SystemSpec,
}

impl StationaryDensity {
    pub fn grid(&self) -> &[f64] {
        &self.xs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Trapezoid quadrature weight of node `i`.
    pub fn weight(&self, i: usize) -> f64 {
        if i == 0 || i + 1 == self.xs.len() {
            0.5 * self.dx
        } else {
            self.dx
        }
    }

    /// Trapezoid quadrature of `x^k rho(x)`.
    pub fn moment(&self, k: usize) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.xs.len() {
            acc += self.weight(i) * self.xs[i].powi(k as i32) * self.values[i];
        }
        acc
    }

    /// Trapezoid quadrature of `f(x) rho(x)` for grid-sampled `f`.
    pub fn integrate_against(&self, f: impl Fn(f64) -> f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.xs.len() {
            acc += self.weight(i) * f(self.xs[i]) * self.values[i];
        }
        acc
    }

    /// Two-column CSV dump `x,rho` for plotting.
    pub fn write_csv(&self, mut out: impl std::io::Write) -> Result<()> {
        writeln!(out, "x,rho")?;
        for (x, r) in self.xs.iter().zip(&self.values) {
            writeln!(out, "{x},{r}")?;
        }
        Ok(())
    }
}

/// How the interaction closure moments are obtained when (re)building a
/// density at new parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum MomentClosure {
    /// Damped fixed point of the self-consistency condition from this start.
    SelfConsistent { m0: f64 },
    /// Raw moments held fixed (e.g. estimated from data); no re-solve.
    Frozen(Vec<f64>),
}

/// Builds the stationary density under the requested closure policy.
pub fn build_density(
    system: &SystemSpec,
    closure: &MomentClosure,
    opts: &DensityOptions,
) -> Result<StationaryDensity> {
    match closure {
        MomentClosure::SelfConsistent { m0 } => {
            solve_self_consistency(system, *m0, opts).map(|(_, rho)| rho)
        }
        MomentClosure::Frozen(moments) => build_density_given_moments(system, moments, opts),
    }
}

/// Trapezoid moment of a gridded density (spec surface; see also `moment`).
pub fn density_moment(rho: &StationaryDensity, k: usize) -> f64 {
    rho.moment(k)
}

/// Sample raw moment `(1/(M+1)) sum X_m^k` of an observation series.
pub fn estimate_moment_from_data(obs: &ObservationSeries, k: usize) -> f64 {
    let n = obs.samples().len();
    let mut acc = 0.0;
    for &x in obs.samples() {
        acc += x.powi(k as i32);
    }
    acc / n as f64
}

/// Builds the Gibbs density with the interaction closed by `moments`.
///
/// `moments` holds the raw moments `mu_0..=mu_d` with `d = degree(W')`; for
/// the quadratic interaction only the mean `mu_1` enters.
pub fn build_density_given_moments(
    system: &SystemSpec,
    moments: &[f64],
    opts: &DensityOptions,
) -> Result<StationaryDensity> {
    let exponent = gibbs_exponent_coeffs(&system.confining, &system.interaction, moments)?;
    build_from_exponent(system, moments, &exponent, opts)
}

/// Convenience wrapper for the quadratic interaction: closes with `mu_1 = m`.
pub fn build_density_given_moment(
    system: &SystemSpec,
    m: f64,
    opts: &DensityOptions,
) -> Result<StationaryDensity> {
    let d = system.interaction.drift_degree();
    let mut moments = vec![0.0; d + 1];
    moments[0] = 1.0;
    if d >= 1 {
        moments[1] = m;
    }
    // Higher closure moments (general interactions only) start at the
    // Gaussian-like defaults of zero; callers needing them should use
    // `build_density_given_moments` or the self-consistency solve.
    build_density_given_moments(system, &moments, opts)
}

/// Damped fixed-point solve of the self-consistency condition.
///
/// Iterates `mu <- mu + damping * (moments(rho_mu) - mu)` over the raw-moment
/// closure vector (a scalar mean for the quadratic interaction), starting from
/// mean `m0`. Returns the reached mean together with its density.
pub fn solve_self_consistency(
    system: &SystemSpec,
    m0: f64,
    opts: &DensityOptions,
) -> Result<(f64, StationaryDensity)> {
    let d = system.interaction.drift_degree().max(1);
    let mut moments = vec![0.0; d + 1];
    moments[0] = 1.0;
    moments[1] = m0;
    // Seed the higher closure moments from the initial-guess density.
    if d > 1 {
        let rho = build_density_given_moments(system, &moments, opts)?;
        for k in 2..=d {
            moments[k] = rho.moment(k);
        }
    }

    let mut residual_history = Vec::new();
    for _ in 0..opts.max_iters {
        let rho = build_density_given_moments(system, &moments, opts)?;
        let mut max_step = 0.0f64;
        let mut updated = moments.clone();
        for k in 1..=d {
            let target = rho.moment(k);
            let step = target - moments[k];
            max_step = max_step.max(step.abs());
            updated[k] = moments[k] + opts.damping * step;
        }
        residual_history.push(max_step);
        if max_step < opts.fp_tol {
            return Ok((moments[1], rho));
        }
        moments = updated;
    }
    let tail = residual_history
        .split_off(residual_history.len().saturating_sub(12));
    Err(Error::FixedPointDiverged(tail))
}

/// Max-norm residual of the stationary flux `V' rho + (W'*rho) rho + sigma rho'`,
/// scaled by `max rho`; the derivative is taken by central differences.
pub fn stationary_fp_residual(rho: &StationaryDensity, system: &SystemSpec) -> Result<f64> {
    let conv = crate::potentials::convolved_drift_coeffs(
        &system.interaction,
        &rho.closure_moments_for_residual(system)?,
    )?;
    let dv = system.confining.derivative_coeffs();
    let xs = rho.grid();
    let vals = rho.values();
    let mut max_flux = 0.0f64;
    let mut max_rho = 0.0f64;
    for i in 1..xs.len() - 1 {
        let x = xs[i];
        let drift = poly_eval(&dv, x) + poly_eval(&conv, x);
        let drho = (vals[i + 1] - vals[i - 1]) / (2.0 * rho.dx());
        let flux = drift * vals[i] + system.sigma * drho;
        max_flux = max_flux.max(flux.abs());
        max_rho = max_rho.max(vals[i]);
    }
    if max_rho == 0.0 {
        return Err(Error::DegenerateDensity("density is identically zero".into()));
    }
    Ok(max_flux / max_rho)
}

impl StationaryDensity {
    /// Raw moments of this density up to `degree(W')`, recomputed by quadrature.
    fn closure_moments_for_residual(&self, system: &SystemSpec) -> Result<Vec<f64>> {
        let d = system.interaction.drift_degree();
        let mut m = vec![0.0; d + 1];
        for (k, slot) in m.iter_mut().enumerate() {
            *slot = self.moment(k);
        }
        m[0] = 1.0;
        Ok(m)
    }
}

/// Monomial coefficients of the Gibbs exponent `V(x) + (W * rho)(x)` with the
/// convolution closed by raw moments; the moment-only constant is dropped
/// (it cancels against the normalizer).
fn gibbs_exponent_coeffs(
    pot_v: &ConfiningPotential,
    pot_w: &InteractionPotential,
    moments: &[f64],
) -> Result<Vec<f64>> {
    let w = pot_w.value_coeffs();
    let deg_w = w.len().saturating_sub(1);
    // x-dependent terms need moments only up to degree(W') = degree(W) - 1.
    let needed = deg_w.saturating_sub(1);
    if moments.len() < needed + 1 {
        return Err(Error::MissingMoments {
            needed,
            got: moments.len().saturating_sub(1),
        });
    }
    let v = pot_v.value_coeffs();
    let mut out = vec![0.0; v.len().max(deg_w + 1)];
    for (i, c) in v.iter().enumerate() {
        out[i] += c;
    }
    for (k, &ck) in w.iter().enumerate() {
        if ck == 0.0 {
            continue;
        }
        for j in 1..=k {
            let sign = if (k - j) % 2 == 0 { 1.0 } else { -1.0 };
            out[j] += ck * binomial(k, j) * sign * moments[k - j];
        }
    }
    Ok(out)
}

fn build_from_exponent(
    system: &SystemSpec,
    moments: &[f64],
    exponent: &[f64],
    opts: &DensityOptions,
) -> Result<StationaryDensity> {
    if opts.nodes < 16 {
        return Err(Error::InvalidConfig(format!(
            "density grid needs at least 16 nodes, got {}",
            opts.nodes
        )));
    }
    let sigma = system.sigma;
    let (mut lo, mut hi, e_min) = truncation_domain(exponent, sigma)?;

    for _attempt in 0..8 {
        let n = opts.nodes;
        let dx = (hi - lo) / (n - 1) as f64;
        let xs: Vec<f64> = (0..n).map(|i| lo + i as f64 * dx).collect();
        let mut values: Vec<f64> = xs
            .iter()
            .map(|&x| (-(poly_eval(exponent, x) - e_min) / sigma).exp())
            .collect();
        let mut mass = 0.0;
        for (i, v) in values.iter().enumerate() {
            let w = if i == 0 || i + 1 == n { 0.5 } else { 1.0 };
            mass += w * v * dx;
        }
        if !mass.is_finite() || mass < 1e-300 {
            return Err(Error::DegenerateDensity(format!(
                "normalizer {mass} on [{lo}, {hi}]"
            )));
        }
        for v in values.iter_mut() {
            *v /= mass;
        }
        let peak = values.iter().cloned().fold(0.0f64, f64::max);
        let boundary = values[0].max(values[n - 1]);
        if boundary < 1e-12 * peak {
            let z = mass * (-e_min / sigma).exp();
            return Ok(StationaryDensity {
                xs,
                values,
                dx,
                normalizer: z,
                mean_param: moments.get(1).copied().unwrap_or(0.0),
                closure_moments: moments.to_vec(),
                system: system.clone(),
            });
        }
        // Domain too narrow for the boundary-mass invariant: widen and retry.
        let width = hi - lo;
        lo -= 0.25 * width;
        hi += 0.25 * width;
    }
    Err(Error::DegenerateDensity(
        "could not find a domain with negligible boundary mass".into(),
    ))
}

/// Truncation interval for the Gibbs factor `exp(-(E(x) - E_min)/sigma)`.
///
/// Starts from mode +/- 8 curvature scales and extends until the exponent
/// exceeds `E_min + 40 sigma` on both sides, so every sub-dominant well is
/// covered and the boundary density is below the 1e-12 mass guard.
fn truncation_domain(exponent: &[f64], sigma: f64) -> Result<(f64, f64, f64)> {
    const PROBE: usize = 8001;
    let deg = exponent.len() - 1;
    let leading = *exponent.last().unwrap_or(&0.0);
    if deg < 2 || leading <= 0.0 {
        return Err(Error::DegenerateDensity(format!(
            "Gibbs exponent of degree {deg} with leading coefficient {leading} is not confining"
        )));
    }

    let mut radius = 8.0;
    let cutoff = 40.0 * sigma;
    for _ in 0..24 {
        let dx = 2.0 * radius / (PROBE - 1) as f64;
        let mut e_min = f64::INFINITY;
        let mut i_min = 0;
        let mut e_vals = Vec::with_capacity(PROBE);
        for i in 0..PROBE {
            let x = -radius + i as f64 * dx;
            let e = poly_eval(exponent, x);
            if e < e_min {
                e_min = e;
                i_min = i;
            }
            e_vals.push(e);
        }
        let edge_ok = e_vals[0] - e_min >= cutoff && e_vals[PROBE - 1] - e_min >= cutoff;
        if !edge_ok {
            radius *= 2.0;
            continue;
        }
        // Mode and curvature-based scale from the probe.
        let mode = -radius + i_min as f64 * dx;
        let d2 = if i_min == 0 || i_min == PROBE - 1 {
            leading.max(1.0)
        } else {
            ((e_vals[i_min - 1] - 2.0 * e_vals[i_min] + e_vals[i_min + 1]) / (dx * dx)).max(1e-8)
        };
        let scale = (sigma / d2).sqrt();
        // Outermost probe points still within the cutoff band.
        let first = e_vals.iter().position(|&e| e - e_min <= cutoff).unwrap();
        let last = PROBE - 1 - e_vals.iter().rev().position(|&e| e - e_min <= cutoff).unwrap();
        let lo = (mode - 8.0 * scale).min(-radius + first as f64 * dx - 2.0 * dx);
        let hi = (mode + 8.0 * scale).max(-radius + last as f64 * dx + 2.0 * dx);
        let pad = 0.02 * (hi - lo);
        return Ok((lo - pad, hi + pad, e_min));
    }
    Err(Error::DegenerateDensity(
        "could not bracket the Gibbs exponent growth".into(),
    ))
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k.min(n));
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{BasisTerm, InteractionPotential};

    pub(crate) fn ou_system() -> SystemSpec {
        SystemSpec::new(
            ConfiningPotential::quadratic(),
            InteractionPotential::quadratic(0.5),
            1.0,
        )
        .unwrap()
    }

    fn bistable_system(sigma: f64) -> SystemSpec {
        let v = ConfiningPotential::new(
            vec![BasisTerm::new(0.25, 4), BasisTerm::new(-0.5, 2)],
            vec![1.0, 2.0],
        )
        .unwrap();
        SystemSpec::new(v, InteractionPotential::quadratic(0.5), sigma).unwrap()
    }

    #[test]
    fn ou_density_is_the_gaussian_with_reduced_variance() {
        let rho = build_density_given_moment(&ou_system(), 0.0, &DensityOptions::default())
            .unwrap();
        assert!((rho.moment(0) - 1.0).abs() < 1e-10);
        assert!((rho.moment(2) - 2.0 / 3.0).abs() < 1e-8, "{}", rho.moment(2));
        assert!(rho.moment(1).abs() < 1e-10);
    }

    #[test]
    fn density_without_interaction_ignores_the_moment() {
        let sys = SystemSpec::new(
            ConfiningPotential::quadratic(),
            InteractionPotential::quadratic(0.0),
            1.0,
        )
        .unwrap();
        let opts = DensityOptions::default();
        let a = build_density_given_moment(&sys, 0.0, &opts).unwrap();
        let b = build_density_given_moment(&sys, 3.0, &opts).unwrap();
        for k in 0..5 {
            assert!((a.moment(k) - b.moment(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn bistable_density_above_transition_is_symmetric() {
        let rho =
            build_density_given_moment(&bistable_system(0.75), 0.0, &DensityOptions::default())
                .unwrap();
        assert!(rho.moment(1).abs() < 1e-10, "{}", rho.moment(1));
        // Bimodal: density dips at the origin relative to the wells.
        let xs = rho.grid();
        let at = |x: f64| {
            let i = ((x - xs[0]) / rho.dx()).round() as usize;
            rho.values()[i]
        };
        assert!(at(0.0) < 0.5 * at(1.22));
    }

    #[test]
    fn boundary_mass_invariant_holds() {
        for sys in [ou_system(), bistable_system(0.75), bistable_system(0.5)] {
            let rho =
                build_density_given_moment(&sys, 0.0, &DensityOptions::default()).unwrap();
            let peak = rho.values().iter().cloned().fold(0.0f64, f64::max);
            let boundary = rho.values()[0].max(*rho.values().last().unwrap());
            assert!(boundary < 1e-12 * peak);
            assert!(rho.values().iter().all(|v| *v >= 0.0));
            assert!((rho.moment(0) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn self_consistency_ou_reaches_zero_mean() {
        for m0 in [-1.0, 0.0, 2.0] {
            let (m, rho) =
                solve_self_consistency(&ou_system(), m0, &DensityOptions::default()).unwrap();
            assert!(m.abs() < 1e-9, "m0={m0} gave m={m}");
            assert!((m - rho.moment(1)).abs() < 1e-9);
        }
    }

    #[test]
    fn self_consistency_from_symmetric_start_is_exactly_zero() {
        let (m, _) =
            solve_self_consistency(&bistable_system(0.75), 0.0, &DensityOptions::default())
                .unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn bistable_above_critical_noise_has_unique_zero_state() {
        for m0 in [-1.0, 0.0, 1.0] {
            let (m, _) =
                solve_self_consistency(&bistable_system(0.75), m0, &DensityOptions::default())
                    .unwrap();
            assert!(m.abs() < 1e-8, "m0={m0} gave m={m}");
        }
    }

    /// Independent oracle for the nonzero bistable fixed point: undamped
    /// iteration with Simpson quadrature on a fixed wide fine grid.
    fn bistable_mean_oracle(sigma: f64, m0: f64) -> f64 {
        let n = 16_001; // odd for Simpson
        let (lo, hi) = (-4.0, 4.0);
        let dx = (hi - lo) / (n - 1) as f64;
        let mut m = m0;
        for _ in 0..400 {
            let mut mass = 0.0;
            let mut first = 0.0;
            for i in 0..n {
                let x = lo + i as f64 * dx;
                let e = 0.25 * x.powi(4) - x * x + 0.5 * (0.5 * x * x - m * x);
                let w = if i == 0 || i == n - 1 {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                let v = (-e / sigma).exp();
                mass += w * v;
                first += w * x * v;
            }
            let next = first / mass;
            if (next - m).abs() < 1e-13 {
                return next;
            }
            m = next;
        }
        m
    }

    #[test]
    fn bistable_below_critical_noise_has_two_states() {
        // Frozen from the Simpson fixed-point oracle below.
        const M_BAR: f64 = 0.9388191283;
        let oracle = bistable_mean_oracle(0.5, 1.0);
        assert!(
            (oracle - M_BAR).abs() < 1e-7,
            "oracle drifted: {oracle} vs frozen {M_BAR}"
        );

        let opts = DensityOptions::default();
        let sys = bistable_system(0.5);
        let (m_plus, _) = solve_self_consistency(&sys, 1.0, &opts).unwrap();
        let (m_minus, _) = solve_self_consistency(&sys, -1.0, &opts).unwrap();
        assert!((m_plus - M_BAR).abs() < 1e-6, "m+ = {m_plus}");
        assert!((m_minus + M_BAR).abs() < 1e-6, "m- = {m_minus}");
    }

    #[test]
    fn moments_of_ou_density() {
        let rho = build_density_given_moment(&ou_system(), 0.0, &DensityOptions::default())
            .unwrap();
        assert!((density_moment(&rho, 0) - 1.0).abs() < 1e-10);
        assert!(density_moment(&rho, 1).abs() < 1e-10);
        assert!((density_moment(&rho, 2) - 2.0 / 3.0).abs() < 1e-8);
    }

    #[test]
    fn data_moment_matches_hand_values() {
        let obs = ObservationSeries::from_samples(vec![3.5, 3.5, 3.5], 1.0, 0).unwrap();
        assert_eq!(estimate_moment_from_data(&obs, 1), 3.5);
        let obs = ObservationSeries::from_samples(vec![-1.0, 1.0], 1.0, 0).unwrap();
        assert_eq!(estimate_moment_from_data(&obs, 1), 0.0);
    }

    #[test]
    fn data_moment_tracks_the_ergodic_average() {
        // Second moment of a long mean-reverting series against the
        // stationary value sigma / (1 + kappa).
        let cfg = crate::simulator::SimConfig {
            n_particles: 32,
            t_final: 1000.0,
            h: 0.01,
            sigma: 1.0,
            seed: 606,
            initial_value: 0.0,
        };
        let sys = ou_system();
        let path = crate::simulator::simulate_ensemble_strided(
            &cfg,
            &sys.confining,
            &sys.interaction,
            100,
        )
        .unwrap();
        let obs = crate::simulator::subsample(&path, 1.0, 0).unwrap();
        assert_eq!(obs.transitions(), 1000);
        let m2 = estimate_moment_from_data(&obs, 2);
        let target = 2.0 / 3.0;
        assert!((m2 - target).abs() < 0.1 * target, "m2 = {m2}");
    }

    #[test]
    fn flux_residual_small_and_second_order() {
        let sys = ou_system();
        let coarse = DensityOptions {
            nodes: 2001,
            ..DensityOptions::default()
        };
        let fine = DensityOptions {
            nodes: 4001,
            ..DensityOptions::default()
        };
        let rho_c = build_density_given_moment(&sys, 0.0, &coarse).unwrap();
        let rho_f = build_density_given_moment(&sys, 0.0, &fine).unwrap();
        let r_c = stationary_fp_residual(&rho_c, &sys).unwrap();
        let r_f = stationary_fp_residual(&rho_f, &sys).unwrap();
        assert!(r_c < 1e-4, "coarse residual {r_c}");
        let ratio = r_c / r_f;
        assert!(
            ratio > 2.5 && ratio < 6.0,
            "expected ~4x reduction, got {ratio} ({r_c} -> {r_f})"
        );
    }

    #[test]
    fn perturbed_density_is_detected_by_the_residual() {
        let sys = ou_system();
        let rho = build_density_given_moment(&sys, 0.0, &DensityOptions::default()).unwrap();
        let base = stationary_fp_residual(&rho, &sys).unwrap();

        let mut bad = rho.clone();
        let mut mass = 0.0;
        let n = bad.xs.len();
        for i in 0..n {
            bad.values[i] *= 1.0 + 0.1 * bad.xs[i].sin();
        }
        for i in 0..n {
            let w = if i == 0 || i + 1 == n { 0.5 } else { 1.0 };
            mass += w * bad.values[i] * bad.dx;
        }
        for v in bad.values.iter_mut() {
            *v /= mass;
        }
        let perturbed = stationary_fp_residual(&bad, &sys).unwrap();
        assert!(
            perturbed > 10.0 * base,
            "perturbed {perturbed} vs base {base}"
        );
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let rho = build_density_given_moment(&ou_system(), 0.0, &DensityOptions::default())
            .unwrap();
        let mut buf = Vec::new();
        rho.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,rho\n"));
        assert_eq!(text.lines().count(), rho.len() + 1);
    }
}
