//! Synthetic data generation.
//!
//! Explicit Euler-Maruyama integration of the N-particle system and of the
//! one-dimensional linearized mean-field dynamics. Every particle draws its
//! noise from an independent counter-split stream of one master seed, so the
//! per-particle noise does not depend on the ensemble size.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::invariant::StationaryDensity;
use crate::potentials::{
    convolved_drift_coeffs, poly_eval, total_drift_coeffs, ConfiningPotential,
    InteractionPotential,
};

/// Euler-Maruyama integration parameters.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SimConfig {
    pub n_particles: usize,
    pub t_final: f64,
    /// Integration step.
    pub h: f64,
    /// Diffusion coefficient (noise amplitude is `sqrt(2 sigma h)`).
    pub sigma: f64,
    pub seed: u64,
    /// Deterministic initial condition shared by all particles.
    pub initial_value: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::InvalidConfig("particle count must be >= 1".into()));
        }
        if !(self.h > 0.0) {
            return Err(Error::InvalidConfig(format!("step must be positive, got {}", self.h)));
        }
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "diffusion must be finite and nonnegative, got {}",
                self.sigma
            )));
        }
        self.steps()?;
        Ok(())
    }

    /// Number of integration steps; `t_final / h` must be a positive integer.
    pub fn steps(&self) -> Result<usize> {
        let ratio = self.t_final / self.h;
        let steps = ratio.round();
        if steps < 1.0 || (ratio - steps).abs() > 1e-9 * steps.max(1.0) {
            return Err(Error::InvalidConfig(format!(
                "t_final/h = {ratio} is not a positive integer step count"
            )));
        }
        Ok(steps as usize)
    }
}

/// Ensemble trajectory, one column per particle, one row per saved time.
#[derive(Debug, Clone)]
pub struct EnsemblePath {
    values: Array2<f64>,
    /// Integration step used to generate the path.
    pub h: f64,
    /// Rows are saved every `save_stride` integration steps.
    pub save_stride: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl EnsemblePath {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn n_particles(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    /// Time between consecutive saved rows.
    pub fn row_dt(&self) -> f64 {
        self.h * self.save_stride as f64
    }

    /// Drops the leading `duration` of the path (burn-in discard).
    ///
    /// The first remaining row becomes the new starting state.
    pub fn discard_initial(&self, duration: f64) -> Result<EnsemblePath> {
        if duration == 0.0 {
            return Ok(self.clone());
        }
        let ratio = duration / self.row_dt();
        let rows = ratio.round();
        if rows < 0.0 || (ratio - rows).abs() > 1e-9 * rows.max(1.0) {
            return Err(Error::StrideNotInteger {
                delta: duration,
                step: self.row_dt(),
            });
        }
        let drop = rows as usize;
        if drop + 2 > self.n_rows() {
            return Err(Error::InvalidConfig(format!(
                "burn-in of {duration} leaves fewer than two saved rows"
            )));
        }
        Ok(EnsemblePath {
            values: self.values.slice(ndarray::s![drop.., ..]).to_owned(),
            h: self.h,
            save_stride: self.save_stride,
            sigma: self.sigma,
            seed: self.seed,
        })
    }

    /// CSV dump: `# h = ..` header, then one row per saved time.
    pub fn write_csv(&self, mut out: impl std::io::Write) -> Result<()> {
        writeln!(
            out,
            "# h = {}, sigma = {}, seed = {}, save_stride = {}",
            self.h, self.sigma, self.seed, self.save_stride
        )?;
        write!(out, "t")?;
        for n in 0..self.n_particles() {
            write!(out, ",p{n}")?;
        }
        writeln!(out)?;
        for r in 0..self.n_rows() {
            write!(out, "{}", r as f64 * self.row_dt())?;
            for n in 0..self.n_particles() {
                write!(out, ",{}", self.values[(r, n)])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Subsampled observations of one particle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObservationSeries {
    samples: Vec<f64>,
    /// Sampling interval between consecutive observations.
    pub delta: f64,
    pub particle_index: usize,
}

impl ObservationSeries {
    pub fn from_samples(samples: Vec<f64>, delta: f64, particle_index: usize) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidConfig(
                "an observation series needs at least one transition".into(),
            ));
        }
        if !(delta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sampling interval must be positive, got {delta}"
            )));
        }
        Ok(ObservationSeries {
            samples,
            delta,
            particle_index,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Number of transitions `M` (one less than the sample count).
    pub fn transitions(&self) -> usize {
        self.samples.len() - 1
    }

    /// Keeps only the first `m` transitions.
    pub fn truncated(&self, m: usize) -> Result<ObservationSeries> {
        if m < 1 || m > self.transitions() {
            return Err(Error::InvalidConfig(format!(
                "cannot truncate a series with {} transitions to {m}",
                self.transitions()
            )));
        }
        ObservationSeries::from_samples(
            self.samples[..=m].to_vec(),
            self.delta,
            self.particle_index,
        )
    }
}

/// Integrates the interacting particle system, saving every row.
pub fn simulate_ensemble(
    cfg: &SimConfig,
    pot_v: &ConfiningPotential,
    pot_w: &InteractionPotential,
) -> Result<EnsemblePath> {
    simulate_ensemble_strided(cfg, pot_v, pot_w, 1)
}

/// Integrates the interacting particle system, saving every `save_stride`-th
/// step (the step count must divide evenly).
pub fn simulate_ensemble_strided(
    cfg: &SimConfig,
    pot_v: &ConfiningPotential,
    pot_w: &InteractionPotential,
    save_stride: usize,
) -> Result<EnsemblePath> {
    let streams: Vec<u64> = (0..cfg.n_particles as u64).collect();
    simulate_with_streams(cfg, pot_v, pot_w, save_stride, &streams)
}

fn simulate_with_streams(
    cfg: &SimConfig,
    pot_v: &ConfiningPotential,
    pot_w: &InteractionPotential,
    save_stride: usize,
    streams: &[u64],
) -> Result<EnsemblePath> {
    cfg.validate()?;
    let steps = cfg.steps()?;
    if save_stride == 0 || steps % save_stride != 0 {
        return Err(Error::InvalidConfig(format!(
            "save stride {save_stride} does not divide the step count {steps}"
        )));
    }
    let n = cfg.n_particles;
    debug_assert_eq!(streams.len(), n);

    let mut rngs: Vec<ChaCha8Rng> = streams
        .iter()
        .map(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(s);
            rng
        })
        .collect();

    let dv = pot_v.derivative_coeffs();
    let wprime_deg = pot_w.drift_degree();
    let mut moments = vec![0.0; wprime_deg + 1];
    let noise_scale = (2.0 * cfg.sigma * cfg.h).sqrt();

    let rows = steps / save_stride + 1;
    let mut values = Array2::zeros((rows, n));
    let mut x = vec![cfg.initial_value; n];
    for (j, &v) in x.iter().enumerate() {
        values[(0, j)] = v;
    }

    for k in 0..steps {
        // Empirical raw moments close the interaction sum in O(N).
        moments[0] = 1.0;
        for r in 1..=wprime_deg {
            let mut acc = 0.0;
            for &xi in &x {
                acc += xi.powi(r as i32);
            }
            moments[r] = acc / n as f64;
        }
        let conv = convolved_drift_coeffs(pot_w, &moments)?;
        for (j, xj) in x.iter_mut().enumerate() {
            let drift = -poly_eval(&dv, *xj) - poly_eval(&conv, *xj);
            let xi: f64 = rngs[j].sample(StandardNormal);
            *xj += drift * cfg.h + noise_scale * xi;
            if !xj.is_finite() {
                return Err(Error::NonFinite {
                    step: k + 1,
                    particle: j,
                });
            }
        }
        if (k + 1) % save_stride == 0 {
            let r = (k + 1) / save_stride;
            for (j, &v) in x.iter().enumerate() {
                values[(r, j)] = v;
            }
        }
    }

    Ok(EnsemblePath {
        values,
        h: cfg.h,
        save_stride,
        sigma: cfg.sigma,
        seed: cfg.seed,
    })
}

/// Extracts observations of one particle at sampling interval `delta`.
pub fn subsample(path: &EnsemblePath, delta: f64, particle_index: usize) -> Result<ObservationSeries> {
    if particle_index >= path.n_particles() {
        return Err(Error::InvalidConfig(format!(
            "particle {particle_index} out of range 0..{}",
            path.n_particles()
        )));
    }
    let row_dt = path.row_dt();
    let ratio = delta / row_dt;
    let stride = ratio.round();
    if stride < 1.0 || (ratio - stride).abs() > 1e-9 * stride {
        return Err(Error::StrideNotInteger { delta, step: row_dt });
    }
    let stride = stride as usize;
    let m = (path.n_rows() - 1) / stride;
    let samples: Vec<f64> = (0..=m)
        .map(|i| path.values()[(i * stride, particle_index)])
        .collect();
    ObservationSeries::from_samples(samples, delta, particle_index)
}

/// Draws i.i.d. stationary transition pairs `(X_0, X_delta)` of the
/// linearized mean-field dynamics.
///
/// `X_0` is sampled from `rho` by inverse-CDF interpolation on its grid; the
/// path is then integrated with step `cfg.h` and the drift frozen at the
/// moments of `rho`. With `delta = 0` the pairs degenerate to `(X_0, X_0)`.
pub fn simulate_stationary_linearized(
    cfg: &SimConfig,
    pot_v: &ConfiningPotential,
    pot_w: &InteractionPotential,
    rho: &StationaryDensity,
    n_pairs: usize,
    delta: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(cfg.h > 0.0) {
        return Err(Error::InvalidConfig(format!("step must be positive, got {}", cfg.h)));
    }
    let steps = if delta == 0.0 {
        0
    } else {
        let ratio = delta / cfg.h;
        let steps = ratio.round();
        if steps < 1.0 || (ratio - steps).abs() > 1e-9 * steps {
            return Err(Error::StrideNotInteger { delta, step: cfg.h });
        }
        steps as usize
    };

    let mut moments = vec![0.0; pot_w.drift_degree() + 1];
    for (k, slot) in moments.iter_mut().enumerate() {
        *slot = rho.moment(k);
    }
    moments[0] = 1.0;
    let drift = total_drift_coeffs(pot_v, pot_w, &moments)?;
    let cdf = CumulativeDensity::new(rho);
    let noise_scale = (2.0 * cfg.sigma * cfg.h).sqrt();

    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let u: f64 = rng.gen();
        let x0 = cdf.inverse(u);
        let mut x = x0;
        for k in 0..steps {
            let xi: f64 = rng.sample(StandardNormal);
            x += poly_eval(&drift, x) * cfg.h + noise_scale * xi;
            if !x.is_finite() {
                return Err(Error::NonFinite { step: k + 1, particle: i });
            }
        }
        pairs.push((x0, x));
    }
    Ok(pairs)
}

/// Coupling distance between the particle system and the linearized
/// mean-field dynamics driven by the same Brownian increments.
///
/// Each particle is paired with one mean-field copy sharing its noise stream;
/// the returned value is the sup over time of the Monte Carlo estimate of
/// `E[|X_t^(n) - X_t|^2]^(1/2)` taken across the ensemble.
pub fn coupled_chaos_error(
    cfg: &SimConfig,
    pot_v: &ConfiningPotential,
    pot_w: &InteractionPotential,
    rho: &StationaryDensity,
) -> Result<f64> {
    cfg.validate()?;
    let steps = cfg.steps()?;
    let n = cfg.n_particles;

    let mut rngs: Vec<ChaCha8Rng> = (0..n as u64)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(s);
            rng
        })
        .collect();

    let dv = pot_v.derivative_coeffs();
    let wprime_deg = pot_w.drift_degree();
    let mut emp_moments = vec![0.0; wprime_deg + 1];
    let mut rho_moments = vec![0.0; wprime_deg + 1];
    for (k, slot) in rho_moments.iter_mut().enumerate() {
        *slot = rho.moment(k);
    }
    rho_moments[0] = 1.0;
    let mf_drift = total_drift_coeffs(pot_v, pot_w, &rho_moments)?;
    let noise_scale = (2.0 * cfg.sigma * cfg.h).sqrt();

    let mut particles = vec![cfg.initial_value; n];
    let mut copies = vec![cfg.initial_value; n];
    let mut sup = 0.0f64;

    for k in 0..steps {
        emp_moments[0] = 1.0;
        for r in 1..=wprime_deg {
            let mut acc = 0.0;
            for &xi in &particles {
                acc += xi.powi(r as i32);
            }
            emp_moments[r] = acc / n as f64;
        }
        let conv = convolved_drift_coeffs(pot_w, &emp_moments)?;
        let mut sq = 0.0;
        for j in 0..n {
            let xi: f64 = rngs[j].sample(StandardNormal);
            let shock = noise_scale * xi;
            let xp = particles[j];
            particles[j] = xp + (-poly_eval(&dv, xp) - poly_eval(&conv, xp)) * cfg.h + shock;
            let yc = copies[j];
            copies[j] = yc + poly_eval(&mf_drift, yc) * cfg.h + shock;
            if !particles[j].is_finite() || !copies[j].is_finite() {
                return Err(Error::NonFinite { step: k + 1, particle: j });
            }
            let d = particles[j] - copies[j];
            sq += d * d;
        }
        sup = sup.max((sq / n as f64).sqrt());
    }
    Ok(sup)
}

/// Piecewise-linear inverse of the cumulative distribution on the grid.
struct CumulativeDensity {
    xs: Vec<f64>,
    cdf: Vec<f64>,
}

impl CumulativeDensity {
    fn new(rho: &StationaryDensity) -> Self {
        let xs = rho.grid().to_vec();
        let vals = rho.values();
        let dx = rho.dx();
        let mut cdf = vec![0.0; xs.len()];
        for i in 1..xs.len() {
            cdf[i] = cdf[i - 1] + 0.5 * (vals[i - 1] + vals[i]) * dx;
        }
        let total = cdf[xs.len() - 1];
        for c in cdf.iter_mut() {
            *c /= total;
        }
        CumulativeDensity { xs, cdf }
    }

    fn inverse(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let mut lo = 0usize;
        let mut hi = self.cdf.len() - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.cdf[mid] < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let span = self.cdf[hi] - self.cdf[lo];
        if span <= 0.0 {
            return self.xs[hi];
        }
        let t = (u - self.cdf[lo]) / span;
        self.xs[lo] + t * (self.xs[hi] - self.xs[lo])
    }
}
