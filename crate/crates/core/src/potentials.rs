//! Parameter-linear polynomial confining and interaction potentials.
//!
//! Every potential is a linear combination of scaled monomials, so derivatives
//! are exact and the interaction convolution against a density reduces to a
//! finite moment expansion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One scaled monomial `scale * x^exponent` of a potential basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisTerm {
    pub scale: f64,
    pub exponent: u32,
}

impl BasisTerm {
    pub fn new(scale: f64, exponent: u32) -> Self {
        BasisTerm { scale, exponent }
    }
}

/// Confining potential `V(x; alpha) = sum_i alpha_i * scale_i * x^{e_i}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfiningPotential {
    terms: Vec<BasisTerm>,
    params: Vec<f64>,
}

impl ConfiningPotential {
    /// Builds the potential from basis terms and their coefficients.
    ///
    /// Exponents must be pairwise distinct so that each coefficient has an
    /// unambiguous basis function; the declaration order is preserved because
    /// it fixes the ordering of the estimated parameter vector.
    pub fn new(terms: Vec<BasisTerm>, params: Vec<f64>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidPotential(
                "confining potential needs at least one basis term".into(),
            ));
        }
        if terms.len() != params.len() {
            return Err(Error::InvalidPotential(format!(
                "{} basis terms but {} coefficients",
                terms.len(),
                params.len()
            )));
        }
        for (i, a) in terms.iter().enumerate() {
            if !a.scale.is_finite() || a.scale == 0.0 {
                return Err(Error::InvalidPotential(format!(
                    "basis term {i} has degenerate scale {}",
                    a.scale
                )));
            }
            for b in &terms[i + 1..] {
                if a.exponent == b.exponent {
                    return Err(Error::InvalidPotential(format!(
                        "duplicate basis exponent {}",
                        a.exponent
                    )));
                }
            }
        }
        Ok(ConfiningPotential { terms, params })
    }

    /// `V(x) = x^2 / 2`, the quadratic confinement with a fixed coefficient.
    pub fn quadratic() -> Self {
        ConfiningPotential::new(vec![BasisTerm::new(0.5, 2)], vec![1.0]).unwrap()
    }

    pub fn terms(&self) -> &[BasisTerm] {
        &self.terms
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    /// Replaces the coefficient vector (length must match the basis).
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.terms.len() {
            return Err(Error::InvalidPotential(format!(
                "expected {} coefficients, got {}",
                self.terms.len(),
                params.len()
            )));
        }
        Ok(ConfiningPotential {
            terms: self.terms.clone(),
            params: params.to_vec(),
        })
    }

    /// Dense monomial coefficients of `V` (index = power).
    pub fn value_coeffs(&self) -> Vec<f64> {
        scaled_coeffs(&self.terms, &self.params)
    }

    /// Dense monomial coefficients of `V'`.
    pub fn derivative_coeffs(&self) -> Vec<f64> {
        derivative(&self.value_coeffs())
    }

    pub fn value(&self, x: f64) -> f64 {
        poly_eval(&self.value_coeffs(), x)
    }

    /// `V'(x; alpha)`, the confining drift contribution (up to sign).
    pub fn drift(&self, x: f64) -> f64 {
        poly_eval(&self.derivative_coeffs(), x)
    }
}

/// Evaluates the confining force term `V'(x; alpha)` term by term.
pub fn eval_confining_drift(pot: &ConfiningPotential, x: f64) -> f64 {
    pot.drift(x)
}

/// Interaction potential `W`; must be an even function of the displacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InteractionPotential {
    /// `W(x; kappa) = kappa/2 * x^2`, the quadratic mean-reversion coupling.
    Quadratic { kappa: f64 },
    /// Even polynomial `W(x; kappa) = sum_i kappa_i * scale_i * x^{2 m_i}`.
    EvenPolynomial {
        terms: Vec<BasisTerm>,
        params: Vec<f64>,
    },
}

impl InteractionPotential {
    pub fn quadratic(kappa: f64) -> Self {
        InteractionPotential::Quadratic { kappa }
    }

    pub fn even_polynomial(terms: Vec<BasisTerm>, params: Vec<f64>) -> Result<Self> {
        if terms.is_empty() || terms.len() != params.len() {
            return Err(Error::InvalidPotential(
                "even polynomial needs matching nonempty terms and coefficients".into(),
            ));
        }
        for t in &terms {
            if t.exponent % 2 != 0 || t.exponent == 0 {
                return Err(Error::InvalidPotential(format!(
                    "interaction exponent {} is not a positive even power",
                    t.exponent
                )));
            }
        }
        Ok(InteractionPotential::EvenPolynomial { terms, params })
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            InteractionPotential::Quadratic { kappa } => vec![*kappa],
            InteractionPotential::EvenPolynomial { params, .. } => params.clone(),
        }
    }

    pub fn param_len(&self) -> usize {
        match self {
            InteractionPotential::Quadratic { .. } => 1,
            InteractionPotential::EvenPolynomial { params, .. } => params.len(),
        }
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        match self {
            InteractionPotential::Quadratic { .. } => {
                if params.len() != 1 {
                    return Err(Error::InvalidPotential(
                        "quadratic interaction takes exactly one coefficient".into(),
                    ));
                }
                Ok(InteractionPotential::Quadratic { kappa: params[0] })
            }
            InteractionPotential::EvenPolynomial { terms, .. } => {
                InteractionPotential::even_polynomial(terms.clone(), params.to_vec())
            }
        }
    }

    /// Dense monomial coefficients of `W`.
    pub fn value_coeffs(&self) -> Vec<f64> {
        match self {
            InteractionPotential::Quadratic { kappa } => vec![0.0, 0.0, kappa / 2.0],
            InteractionPotential::EvenPolynomial { terms, params } => {
                scaled_coeffs(terms, params)
            }
        }
    }

    /// Dense monomial coefficients of `W'`.
    pub fn derivative_coeffs(&self) -> Vec<f64> {
        derivative(&self.value_coeffs())
    }

    pub fn value(&self, x: f64) -> f64 {
        poly_eval(&self.value_coeffs(), x)
    }

    /// Degree of `W'`; raw moments up to this order close the convolution.
    pub fn drift_degree(&self) -> usize {
        self.derivative_coeffs().len().saturating_sub(1)
    }
}

/// Convolution `(W' * rho)(x)` expanded through raw moments of `rho`.
///
/// `moments[r]` must hold `mu_r = integral of y^r rho(y) dy` for
/// `r = 0..=degree(W')`, with `moments[0] = 1`. For the quadratic interaction
/// this is exactly `kappa * (x - mu_1)`.
pub fn convolved_interaction_drift(
    pot: &InteractionPotential,
    moments: &[f64],
    x: f64,
) -> Result<f64> {
    Ok(poly_eval(&convolved_drift_coeffs(pot, moments)?, x))
}

/// Monomial coefficients in `x` of `(W' * rho)(x)` for the given raw moments.
pub fn convolved_drift_coeffs(pot: &InteractionPotential, moments: &[f64]) -> Result<Vec<f64>> {
    let wprime = pot.derivative_coeffs();
    let deg = wprime.len().saturating_sub(1);
    if moments.len() < deg + 1 {
        return Err(Error::MissingMoments {
            needed: deg,
            got: moments.len().saturating_sub(1),
        });
    }
    // (x - y)^k expanded binomially: the y-powers integrate to raw moments.
    let mut out = vec![0.0; deg + 1];
    for (k, &ck) in wprime.iter().enumerate() {
        if ck == 0.0 {
            continue;
        }
        for j in 0..=k {
            let sign = if (k - j) % 2 == 0 { 1.0 } else { -1.0 };
            out[j] += ck * binomial(k, j) * sign * moments[k - j];
        }
    }
    Ok(out)
}

/// Drift of the linearized mean-field dynamics: `-V'(x) - (W' * rho)(x)`.
pub fn total_drift(
    pot_v: &ConfiningPotential,
    pot_w: &InteractionPotential,
    moments: &[f64],
    x: f64,
) -> Result<f64> {
    Ok(-pot_v.drift(x) - convolved_interaction_drift(pot_w, moments, x)?)
}

/// Monomial coefficients of the linearized drift `-V' - (W' * rho)`.
pub fn total_drift_coeffs(
    pot_v: &ConfiningPotential,
    pot_w: &InteractionPotential,
    moments: &[f64],
) -> Result<Vec<f64>> {
    let dv = pot_v.derivative_coeffs();
    let conv = convolved_drift_coeffs(pot_w, moments)?;
    let mut out = vec![0.0; dv.len().max(conv.len())];
    for (i, c) in dv.iter().enumerate() {
        out[i] -= c;
    }
    for (i, c) in conv.iter().enumerate() {
        out[i] -= c;
    }
    Ok(out)
}

/// Estimated parameter vector `theta = (alpha, kappa[, sigma])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector {
    pub alpha: Vec<f64>,
    pub kappa: Vec<f64>,
    pub sigma: Option<f64>,
}

impl ThetaVector {
    pub fn new(alpha: Vec<f64>, kappa: Vec<f64>, sigma: Option<f64>) -> Result<Self> {
        if let Some(s) = sigma {
            if !(s > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "diffusion component of theta must be positive, got {s}"
                )));
            }
        }
        Ok(ThetaVector { alpha, kappa, sigma })
    }

    /// Total dimension `p = p1 + p2 (+1 when sigma is estimated)`.
    pub fn len(&self) -> usize {
        self.alpha.len() + self.kappa.len() + usize::from(self.sigma.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattens as `(alpha..., kappa..., sigma?)`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.alpha.clone();
        v.extend_from_slice(&self.kappa);
        if let Some(s) = self.sigma {
            v.push(s);
        }
        v
    }

    /// Rebuilds a vector with this one's shape from a flat slice.
    pub fn from_flat(shape: &ThetaVector, flat: &[f64]) -> Result<Self> {
        if flat.len() != shape.len() {
            return Err(Error::InvalidConfig(format!(
                "flat theta has length {}, shape needs {}",
                flat.len(),
                shape.len()
            )));
        }
        let p1 = shape.alpha.len();
        let p2 = shape.kappa.len();
        Ok(ThetaVector {
            alpha: flat[..p1].to_vec(),
            kappa: flat[p1..p1 + p2].to_vec(),
            sigma: shape.sigma.map(|_| flat[p1 + p2]),
        })
    }
}

/// Full model: both potentials at concrete parameters plus the diffusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub confining: ConfiningPotential,
    pub interaction: InteractionPotential,
    pub sigma: f64,
}

impl SystemSpec {
    pub fn new(
        confining: ConfiningPotential,
        interaction: InteractionPotential,
        sigma: f64,
    ) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "diffusion coefficient must be positive and finite, got {sigma}"
            )));
        }
        Ok(SystemSpec {
            confining,
            interaction,
            sigma,
        })
    }

    /// Overrides the free parameter slots with the components of `theta`.
    ///
    /// Empty `alpha`/`kappa` parts leave the corresponding potential fixed.
    pub fn apply_theta(&self, theta: &ThetaVector) -> Result<Self> {
        let confining = if theta.alpha.is_empty() {
            self.confining.clone()
        } else {
            self.confining.with_params(&theta.alpha)?
        };
        let interaction = if theta.kappa.is_empty() {
            self.interaction.clone()
        } else {
            self.interaction.with_params(&theta.kappa)?
        };
        let sigma = theta.sigma.unwrap_or(self.sigma);
        SystemSpec::new(confining, interaction, sigma)
    }
}

/// Horner evaluation of dense monomial coefficients (index = power).
pub fn poly_eval(coeffs: &[f64], x: f64) -> f64 {
    let mut acc = 0.0;
    for &c in coeffs.iter().rev() {
        acc = acc * x + c;
    }
    acc
}

/// Coefficients of the derivative polynomial.
pub fn derivative(coeffs: &[f64]) -> Vec<f64> {
    if coeffs.len() <= 1 {
        return vec![0.0];
    }
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, c)| c * k as f64)
        .collect()
}

fn scaled_coeffs(terms: &[BasisTerm], params: &[f64]) -> Vec<f64> {
    let deg = terms.iter().map(|t| t.exponent).max().unwrap_or(0) as usize;
    let mut out = vec![0.0; deg + 1];
    for (t, p) in terms.iter().zip(params) {
        out[t.exponent as usize] += t.scale * p;
    }
    out
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
    use proptest::prelude::*;

    pub(crate) fn bistable() -> ConfiningPotential {
        ConfiningPotential::new(
            vec![BasisTerm::new(0.25, 4), BasisTerm::new(-0.5, 2)],
            vec![1.0, 2.0],
        )
        .unwrap()
    }

    pub(crate) fn nonsymmetric() -> ConfiningPotential {
        ConfiningPotential::new(
            vec![
                BasisTerm::new(0.25, 4),
                BasisTerm::new(0.5, 2),
                BasisTerm::new(1.0, 1),
            ],
            vec![1.0, -2.0, 1.0],
        )
        .unwrap()
    }

    fn central_difference(pot: &ConfiningPotential, x: f64, h: f64) -> f64 {
        (pot.value(x + h) - pot.value(x - h)) / (2.0 * h)
    }

    #[test]
    fn quadratic_drift_matches_hand_value() {
        let v = ConfiningPotential::quadratic();
        assert_eq!(eval_confining_drift(&v, 2.0), 2.0);
    }

    #[test]
    fn bistable_drift_at_one() {
        // V' = x^3 - 2x at alpha = (1, 2).
        let v = bistable();
        assert_eq!(eval_confining_drift(&v, 1.0), -1.0);
    }

    #[test]
    fn nonsymmetric_drift_at_zero() {
        // V' = x^3 - 2x + 1 at alpha = (1, -2, 1).
        let v = nonsymmetric();
        assert_eq!(eval_confining_drift(&v, 0.0), 1.0);
    }

    #[test]
    fn duplicate_exponents_rejected() {
        let err = ConfiningPotential::new(
            vec![BasisTerm::new(1.0, 2), BasisTerm::new(0.5, 2)],
            vec![1.0, 1.0],
        );
        assert!(err.is_err());
    }

    #[test]
    fn derivative_matches_finite_difference_on_grid() {
        let pots = [
            ConfiningPotential::quadratic(),
            bistable(),
            nonsymmetric(),
        ];
        let mut state = 0x8a5c_d789_635d_2dcfu64;
        let mut next = || {
            // splitmix64 step
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            (z as f64 / u64::MAX as f64) * 20.0 - 10.0
        };
        for pot in &pots {
            for _ in 0..10_000 {
                let x = next();
                let exact = pot.drift(x);
                let approx = central_difference(pot, x, 1e-5);
                let scale = exact.abs().max(1.0);
                assert!(
                    (exact - approx).abs() <= 1e-6 * scale,
                    "x={x}: exact {exact} vs fd {approx}"
                );
            }
        }
    }

    #[test]
    fn quadratic_convolution_is_mean_reversion() {
        let w = InteractionPotential::quadratic(0.5);
        let d = convolved_interaction_drift(&w, &[1.0, 0.0], 2.0).unwrap();
        assert_eq!(d, 1.0);
        let d = convolved_interaction_drift(&w, &[1.0, 0.4], 0.4).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn cubic_convolution_against_quadrature_oracle() {
        // W'(y) = y^3 from the even quartic W = y^4/4; rho standard Gaussian.
        let w = InteractionPotential::even_polynomial(
            vec![BasisTerm::new(0.25, 4)],
            vec![1.0],
        )
        .unwrap();
        let moments = [1.0, 0.0, 1.0, 0.0];
        let got = convolved_interaction_drift(&w, &moments, 1.0).unwrap();

        // Independent oracle: trapezoid quadrature of the convolution integral.
        let n = 400_001;
        let (lo, hi) = (-12.0, 12.0);
        let dx = (hi - lo) / (n - 1) as f64;
        let mut oracle = 0.0;
        for i in 0..n {
            let y = lo + i as f64 * dx;
            let rho = (-(y * y) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let weight = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            oracle += weight * (1.0 - y).powi(3) * rho * dx;
        }
        assert!((oracle - 4.0).abs() < 1e-8, "oracle {oracle}");
        assert!((got - 4.0).abs() < 1e-12, "moment expansion {got}");
    }

    #[test]
    fn missing_moments_is_an_error() {
        let w = InteractionPotential::even_polynomial(
            vec![BasisTerm::new(0.25, 4)],
            vec![1.0],
        )
        .unwrap();
        match convolved_interaction_drift(&w, &[1.0, 0.0], 1.0) {
            Err(Error::MissingMoments { needed: 3, got: 1 }) => {}
            other => panic!("expected MissingMoments, got {other:?}"),
        }
    }

    #[test]
    fn total_drift_examples() {
        let v = ConfiningPotential::quadratic();
        let w = InteractionPotential::quadratic(0.5);
        let m = [1.0, 0.0];
        assert_eq!(total_drift(&v, &w, &m, 1.0).unwrap(), -1.5);
        assert_eq!(total_drift(&v, &w, &m, 0.0).unwrap(), 0.0);
        assert_eq!(total_drift(&bistable(), &w, &m, 1.0).unwrap(), 0.5);
    }

    #[test]
    fn odd_interaction_exponents_rejected() {
        let err = InteractionPotential::even_polynomial(
            vec![BasisTerm::new(1.0, 3)],
            vec![1.0],
        );
        assert!(err.is_err());
    }

    #[test]
    fn theta_roundtrip_and_sigma_guard() {
        let shape = ThetaVector::new(vec![1.0, 2.0], vec![0.5], Some(1.0)).unwrap();
        assert_eq!(shape.len(), 4);
        let flat = shape.to_flat();
        let back = ThetaVector::from_flat(&shape, &flat).unwrap();
        assert_eq!(back, shape);
        assert!(ThetaVector::new(vec![], vec![], Some(-1.0)).is_err());
    }

    #[test]
    fn apply_theta_overrides_free_slots() {
        let sys = SystemSpec::new(
            bistable(),
            InteractionPotential::quadratic(0.5),
            0.75,
        )
        .unwrap();
        let theta = ThetaVector::new(vec![2.0, 1.0], vec![], None).unwrap();
        let out = sys.apply_theta(&theta).unwrap();
        assert_eq!(out.confining.params(), &[2.0, 1.0]);
        assert_eq!(out.interaction.params(), &[0.5]);
        assert_eq!(out.sigma, 0.75);
    }

    proptest! {
        #[test]
        fn quadratic_convolution_is_exact_for_any_moments(
            kappa in -2.0f64..2.0,
            m1 in -5.0f64..5.0,
            x in -20.0f64..20.0,
        ) {
            let w = InteractionPotential::quadratic(kappa);
            let got = convolved_interaction_drift(&w, &[1.0, m1], x).unwrap();
            prop_assert!((got - kappa * (x - m1)).abs() <= 1e-12 * (1.0 + got.abs()));
        }

        #[test]
        fn interaction_is_even(x in -10.0f64..10.0, kappa in 0.1f64..2.0) {
            let quad = InteractionPotential::quadratic(kappa);
            prop_assert_eq!(quad.value(x), quad.value(-x));
            let quart = InteractionPotential::even_polynomial(
                vec![BasisTerm::new(0.25, 4), BasisTerm::new(0.5, 2)],
                vec![kappa, kappa],
            ).unwrap();
            let diff = (quart.value(x) - quart.value(-x)).abs();
            prop_assert!(diff <= 1e-12 * (1.0 + quart.value(x).abs()));
        }

        #[test]
        fn interaction_drift_vanishes_at_origin(kappa in -3.0f64..3.0) {
            let quad = InteractionPotential::quadratic(kappa);
            prop_assert_eq!(poly_eval(&quad.derivative_coeffs(), 0.0), 0.0);
            let quart = InteractionPotential::even_polynomial(
                vec![BasisTerm::new(0.25, 4)],
                vec![kappa],
            ).unwrap();
            prop_assert_eq!(poly_eval(&quart.derivative_coeffs(), 0.0), 0.0);
        }
    }
}
