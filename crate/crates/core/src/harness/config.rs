//! Experiment configuration: a TOML file with nested sections, validated and
//! lowered into the library's native types.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{EstimatingContext, MomentSource, PsiSpec, SolveOptions};
use crate::invariant::DensityOptions;
use crate::potentials::{
    BasisTerm, ConfiningPotential, InteractionPotential, SystemSpec, ThetaVector,
};
use crate::simulator::SimConfig;
use crate::spectral::SpectralOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SensitivityMn,
    SensitivityJ,
    RateFit,
    MleCompare,
    JointSigma,
    Clt,
    Bistable,
    Nonsymmetric,
    ChaosCheck,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::SensitivityMn => "sensitivity_mn",
            ExperimentKind::SensitivityJ => "sensitivity_j",
            ExperimentKind::RateFit => "rate_fit",
            ExperimentKind::MleCompare => "mle_compare",
            ExperimentKind::JointSigma => "joint_sigma",
            ExperimentKind::Clt => "clt",
            ExperimentKind::Bistable => "bistable",
            ExperimentKind::Nonsymmetric => "nonsymmetric",
            ExperimentKind::ChaosCheck => "chaos_check",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfiningConfig {
    pub scales: Vec<f64>,
    pub exponents: Vec<u32>,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InteractionConfig {
    Quadratic { kappa: f64 },
    EvenPolynomial {
        scales: Vec<f64>,
        exponents: Vec<u32>,
        params: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub sigma: f64,
    pub confining: ConfiningConfig,
    pub interaction: InteractionConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimSection {
    pub n_particles: usize,
    pub m_observations: usize,
    pub h: f64,
    pub delta: f64,
    #[serde(default)]
    pub initial_value: f64,
}

fn default_m0() -> f64 {
    0.0
}

fn default_basis_degree() -> usize {
    30
}

fn default_grid_nodes() -> usize {
    2001
}

fn default_g_tol_rel() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateSection {
    /// Which parameter groups are estimated: subset of
    /// `"alpha"`, `"kappa"`, `"sigma"`.
    pub free: Vec<String>,
    /// `psi[j][component]` = exponent list of one monomial sum.
    pub psi: Vec<Vec<Vec<u32>>>,
    /// `"self_consistent"` or `"data"`.
    pub moment_source: String,
    #[serde(default = "default_m0")]
    pub m0: f64,
    pub theta_init: Vec<f64>,
    pub theta_box: Vec<Vec<f64>>,
    #[serde(default = "default_basis_degree")]
    pub basis_degree: usize,
    #[serde(default = "default_grid_nodes")]
    pub grid_nodes: usize,
    #[serde(default = "default_g_tol_rel")]
    pub g_tol_rel: f64,
    /// Use the analytic closed form instead of Newton when applicable
    /// (quadratic confinement and interaction, J = 1, psi_1 = x).
    #[serde(default)]
    pub use_closed_form: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GridSection {
    #[serde(default)]
    pub m_values: Vec<usize>,
    #[serde(default)]
    pub n_values: Vec<usize>,
    #[serde(default)]
    pub j_values: Vec<usize>,
    /// One psi spec per entry of `j_values`.
    #[serde(default)]
    pub psi_sets: Vec<Vec<Vec<Vec<u32>>>>,
    #[serde(default)]
    pub deltas: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    /// Number of independent Brownian realizations `L`.
    pub realizations: usize,
    #[serde(default)]
    pub burn_in: f64,
    pub model: ModelConfig,
    pub sim: SimSection,
    pub estimate: EstimateSection,
    #[serde(default)]
    pub grid: GridSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<()> {
        if self.realizations == 0 {
            return Err(Error::InvalidConfig("realizations must be >= 1".into()));
        }
        if self.sim.n_particles == 0 || self.sim.m_observations == 0 {
            return Err(Error::InvalidConfig(
                "particle and observation counts must be positive".into(),
            ));
        }
        if !(self.sim.h > 0.0) || !(self.sim.delta > 0.0) {
            return Err(Error::InvalidConfig(
                "step and sampling interval must be positive".into(),
            ));
        }
        check_multiple(self.sim.delta, self.sim.h, "delta", "h")?;
        for &d in &self.grid.deltas {
            check_multiple(d, self.sim.h, "grid delta", "h")?;
        }
        if self.burn_in < 0.0 {
            return Err(Error::InvalidConfig("burn_in must be nonnegative".into()));
        }
        if self.burn_in > 0.0 {
            check_multiple(self.burn_in, self.sim.delta, "burn_in", "delta")?;
        }
        if self.grid.m_values.iter().any(|&m| m == 0)
            || self.grid.n_values.iter().any(|&n| n == 0)
            || self.grid.j_values.iter().any(|&j| j == 0)
            || self.grid.deltas.iter().any(|&d| !(d > 0.0))
        {
            return Err(Error::InvalidConfig("grid values must be positive".into()));
        }
        if self.experiment == ExperimentKind::SensitivityJ
            && self.grid.j_values.len() != self.grid.psi_sets.len()
        {
            return Err(Error::InvalidConfig(
                "sensitivity_j needs one psi set per j value".into(),
            ));
        }
        for (fr, tb) in [
            (self.estimate.theta_init.len(), self.estimate.theta_box.len()),
        ] {
            if fr != tb {
                return Err(Error::InvalidConfig(
                    "theta_init and theta_box lengths differ".into(),
                ));
            }
        }
        for b in &self.estimate.theta_box {
            if b.len() != 2 || !(b[0] < b[1]) {
                return Err(Error::InvalidConfig(
                    "each theta_box entry must be [lo, hi] with lo < hi".into(),
                ));
            }
        }
        for f in &self.estimate.free {
            if !matches!(f.as_str(), "alpha" | "kappa" | "sigma") {
                return Err(Error::InvalidConfig(format!(
                    "unknown free parameter group '{f}'"
                )));
            }
        }
        match self.estimate.moment_source.as_str() {
            "self_consistent" | "data" => {}
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown moment_source '{other}'"
                )))
            }
        }
        // Lowering catches the remaining structural problems.
        self.system()?;
        self.theta_shape()?;
        Ok(())
    }

    /// Builds the data-generating model at the true parameters.
    pub fn system(&self) -> Result<SystemSpec> {
        let c = &self.model.confining;
        if c.scales.len() != c.exponents.len() {
            return Err(Error::InvalidConfig(
                "confining scales and exponents lengths differ".into(),
            ));
        }
        let terms: Vec<BasisTerm> = c
            .scales
            .iter()
            .zip(&c.exponents)
            .map(|(&s, &e)| BasisTerm::new(s, e))
            .collect();
        let confining = ConfiningPotential::new(terms, c.params.clone())?;
        let interaction = match &self.model.interaction {
            InteractionConfig::Quadratic { kappa } => InteractionPotential::quadratic(*kappa),
            InteractionConfig::EvenPolynomial {
                scales,
                exponents,
                params,
            } => {
                if scales.len() != exponents.len() {
                    return Err(Error::InvalidConfig(
                        "interaction scales and exponents lengths differ".into(),
                    ));
                }
                let terms: Vec<BasisTerm> = scales
                    .iter()
                    .zip(exponents)
                    .map(|(&s, &e)| BasisTerm::new(s, e))
                    .collect();
                InteractionPotential::even_polynomial(terms, params.clone())?
            }
        };
        SystemSpec::new(confining, interaction, self.model.sigma)
    }

    fn free_has(&self, name: &str) -> bool {
        self.estimate.free.iter().any(|f| f == name)
    }

    /// Shape of the estimated vector, carrying the true values.
    pub fn theta_shape(&self) -> Result<ThetaVector> {
        let sys = self.system()?;
        let alpha = if self.free_has("alpha") {
            sys.confining.params().to_vec()
        } else {
            Vec::new()
        };
        let kappa = if self.free_has("kappa") {
            sys.interaction.params()
        } else {
            Vec::new()
        };
        let sigma = if self.free_has("sigma") {
            Some(sys.sigma)
        } else {
            None
        };
        let shape = ThetaVector::new(alpha, kappa, sigma)?;
        if shape.is_empty() {
            return Err(Error::InvalidConfig("no free parameters selected".into()));
        }
        if shape.len() != self.estimate.theta_init.len() {
            return Err(Error::InvalidConfig(format!(
                "theta_init has {} entries but the free parameters span {}",
                self.estimate.theta_init.len(),
                shape.len()
            )));
        }
        Ok(shape)
    }

    /// True values of the estimated vector, flattened.
    pub fn theta_true(&self) -> Result<Vec<f64>> {
        Ok(self.theta_shape()?.to_flat())
    }

    pub fn moment_source(&self) -> MomentSource {
        match self.estimate.moment_source.as_str() {
            "data" => MomentSource::DataEstimated,
            _ => MomentSource::SelfConsistent {
                m0: self.estimate.m0,
            },
        }
    }

    pub fn density_options(&self) -> DensityOptions {
        DensityOptions {
            nodes: self.estimate.grid_nodes,
            ..DensityOptions::default()
        }
    }

    /// Estimating context with the configured psi functions.
    pub fn context(&self) -> Result<EstimatingContext> {
        self.context_with_psi(self.estimate.psi.clone())
    }

    pub fn context_with_psi(&self, psi: Vec<Vec<Vec<u32>>>) -> Result<EstimatingContext> {
        let psi = PsiSpec::new(psi)?;
        let spectral = SpectralOptions {
            basis_degree: self.estimate.basis_degree,
            n_eigen: psi.n_modes(),
        };
        EstimatingContext::new(
            self.system()?,
            self.theta_shape()?,
            psi,
            self.sim.delta,
            self.moment_source(),
            self.density_options(),
            spectral,
        )
    }

    pub fn solve_options(&self) -> SolveOptions {
        let theta_box = self
            .estimate
            .theta_box
            .iter()
            .map(|b| (b[0], b[1]))
            .collect();
        let mut opts = SolveOptions::with_box(theta_box);
        opts.g_tol_rel = self.estimate.g_tol_rel;
        opts
    }

    pub fn theta_init(&self) -> Result<ThetaVector> {
        ThetaVector::from_flat(&self.theta_shape()?, &self.estimate.theta_init)
    }

    /// Simulation config for one realization.
    pub fn sim_config(&self, n_particles: usize, m_observations: usize, seed: u64) -> SimConfig {
        SimConfig {
            n_particles,
            t_final: self.burn_in + m_observations as f64 * self.sim.delta,
            h: self.sim.h,
            sigma: self.model.sigma,
            seed,
            initial_value: self.sim.initial_value,
        }
    }

    /// Whether the analytic closed form applies (and is requested).
    pub fn closed_form_applies(&self) -> bool {
        self.estimate.use_closed_form
            && self.estimate.psi == vec![vec![vec![1]]]
            && self.estimate.free == vec!["kappa".to_string()]
            && matches!(self.model.interaction, InteractionConfig::Quadratic { .. })
    }
}

fn check_multiple(value: f64, base: f64, vname: &str, bname: &str) -> Result<()> {
    let ratio = value / base;
    let rounded = ratio.round();
    if rounded < 1.0 || (ratio - rounded).abs() > 1e-9 * rounded.max(1.0) {
        return Err(Error::InvalidConfig(format!(
            "{vname} = {value} is not a positive integer multiple of {bname} = {base}"
        )));
    }
    Ok(())
}

/// Derives the seed of realization `l` from the master seed (splitmix64).
pub fn realization_seed(master: u64, l: usize) -> u64 {
    let mut z = master ^ (l as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_toml() -> String {
        crate::harness::presets::preset("ou_sensitivity")
            .unwrap()
            .to_string()
    }

    #[test]
    fn preset_round_trips_through_toml() {
        let cfg = ExperimentConfig::from_toml(&base_toml()).unwrap();
        let echoed = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&echoed).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.grid.m_values, cfg.grid.m_values);
    }

    #[test]
    fn delta_must_be_a_multiple_of_h() {
        let text = base_toml().replace("delta = 1.0", "delta = 0.015");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn burn_in_must_align_with_delta() {
        let mut cfg = ExperimentConfig::from_toml(&base_toml()).unwrap();
        cfg.burn_in = 2.0;
        assert!(cfg.validate().is_ok());
        cfg.burn_in = 0.7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn grid_values_must_be_positive() {
        let text = base_toml().replace(
            "m_values = [31, 62, 125, 250, 500, 1000]",
            "m_values = [0, 62]",
        );
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn psi_dimension_must_match_free_parameters() {
        let text = base_toml().replace("psi = [[[1]]]", "psi = [[[1], [3]]]");
        let cfg = ExperimentConfig::from_toml(&text);
        assert!(cfg.is_err() || cfg.unwrap().context().is_err());
    }

    #[test]
    fn theta_init_outside_its_own_box_is_caught_by_solve() {
        let cfg = ExperimentConfig::from_toml(&base_toml()).unwrap();
        assert_eq!(cfg.theta_true().unwrap(), vec![0.5]);
        assert!(cfg.closed_form_applies());
    }

    #[test]
    fn realization_seeds_are_distinct() {
        let seeds: Vec<u64> = (0..32).map(|l| realization_seed(41, l)).collect();
        let mut unique = seeds.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), seeds.len());
    }
}
