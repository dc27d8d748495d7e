//! Weighted Sturm-Liouville eigenproblem of the linearized generator.
//!
//! The generator is self-adjoint in `L^2(rho)`, so its variational form
//! `sigma <phi', psi'>_rho = lambda <phi, psi>_rho` is discretized with a
//! Galerkin basis of rho-orthonormal polynomials. The mass matrix is then the
//! identity and a dense symmetric eigensolve yields the spectrum; low modes of
//! these Schrodinger-like operators are themselves nearly polynomial, so the
//! approximation converges spectrally in the basis degree.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::invariant::{build_density, DensityOptions, MomentClosure, StationaryDensity};
use crate::potentials::{derivative, poly_eval, SystemSpec, ThetaVector};

/// Degree of the polynomial Galerkin space and how many eigenpairs to report.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SpectralOptions {
    /// Highest monomial degree `K` of the basis.
    pub basis_degree: usize,
    /// Number of nonzero eigenpairs `J` to report (`J <= K - 1`).
    pub n_eigen: usize,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        SpectralOptions {
            basis_degree: 30,
            n_eigen: 2,
        }
    }
}

/// Polynomials `p_0..p_K`, orthonormal in the `rho`-weighted inner product.
#[derive(Debug, Clone)]
pub struct GalerkinBasis {
    degree: usize,
    /// Row `j` holds the monomial coefficients of `p_j`.
    coeffs: Array2<f64>,
    /// Row `j` holds the nodal values of `p_j` on the density grid.
    nodal: Array2<f64>,
}

impl GalerkinBasis {
    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Monomial coefficients of `p_j` (index = power).
    pub fn coefficients(&self, j: usize) -> &[f64] {
        self.coeffs.row(j).to_slice().unwrap()
    }

    /// Values of `p_j` on the density grid the basis was built on.
    pub fn nodal_values(&self, j: usize) -> &[f64] {
        self.nodal.row(j).to_slice().unwrap()
    }
}

/// First `J` nonzero eigenpairs of the linearized generator.
///
/// Eigenvalues are strictly increasing and positive; every eigenfunction has
/// unit `L^2(rho)` norm and a positive leading monomial coefficient.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    lambdas: Vec<f64>,
    /// Row `j-1`: coordinates of `phi_j` over the Galerkin basis.
    basis_coords: Vec<Vec<f64>>,
    /// Row `j-1`: monomial coefficients of `phi_j`.
    monomial: Vec<Vec<f64>>,
    /// Density the problem was assembled with.
    pub rho: StationaryDensity,
    pub sigma: f64,
}

impl EigenSystem {
    /// Number of reported eigenpairs `J`.
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    /// Eigenvalue `lambda_j` for `1 <= j <= J`.
    pub fn lambda(&self, j: usize) -> Result<f64> {
        self.check_index(j)?;
        Ok(self.lambdas[j - 1])
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Monomial coefficients of `phi_j`.
    pub fn phi_coefficients(&self, j: usize) -> Result<&[f64]> {
        self.check_index(j)?;
        Ok(&self.monomial[j - 1])
    }

    /// Coordinates of `phi_j` over the Galerkin basis it was solved in.
    pub fn phi_basis_coordinates(&self, j: usize) -> Result<&[f64]> {
        self.check_index(j)?;
        Ok(&self.basis_coords[j - 1])
    }

    fn check_index(&self, j: usize) -> Result<()> {
        if j == 0 || j > self.lambdas.len() {
            return Err(Error::EigenIndexOutOfRange {
                j,
                j_max: self.lambdas.len(),
            });
        }
        Ok(())
    }

    /// CSV dump `j,lambda,c0,c1,...` of the eigenpairs.
    pub fn write_csv(&self, mut out: impl std::io::Write) -> Result<()> {
        let width = self.monomial.iter().map(Vec::len).max().unwrap_or(0);
        write!(out, "j,lambda")?;
        for k in 0..width {
            write!(out, ",c{k}")?;
        }
        writeln!(out)?;
        for (i, l) in self.lambdas.iter().enumerate() {
            write!(out, "{},{}", i + 1, l)?;
            for k in 0..width {
                write!(out, ",{}", self.monomial[i].get(k).copied().unwrap_or(0.0))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Horner evaluation of `phi_j` at an arbitrary point (polynomial extension
/// beyond the density grid).
pub fn eval_eigenfunction(sys: &EigenSystem, j: usize, x: f64) -> Result<f64> {
    Ok(poly_eval(sys.phi_coefficients(j)?, x))
}

/// Orthonormalizes the monomials `1, x, .., x^K` in `L^2(rho)` by modified
/// Gram-Schmidt with one re-orthogonalization pass.
pub fn build_basis(rho: &StationaryDensity, degree: usize) -> Result<GalerkinBasis> {
    if degree < 2 {
        return Err(Error::InvalidConfig(format!(
            "basis degree must be at least 2, got {degree}"
        )));
    }
    let n = rho.len();
    let xs = rho.grid();
    let weights: Vec<f64> = (0..n).map(|i| rho.weight(i) * rho.values()[i]).collect();

    // Nodal monomial powers x^k, built incrementally.
    let mut powers = Array2::zeros((degree + 1, n));
    for i in 0..n {
        powers[(0, i)] = 1.0;
    }
    for k in 1..=degree {
        for i in 0..n {
            powers[(k, i)] = powers[(k - 1, i)] * xs[i];
        }
    }

    let dot = |a: &[f64], b: &[f64]| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            acc += weights[i] * a[i] * b[i];
        }
        acc
    };

    let mut coeffs = Array2::zeros((degree + 1, degree + 1));
    let mut nodal = Array2::zeros((degree + 1, n));
    for k in 0..=degree {
        let mut vec: Vec<f64> = powers.row(k).to_vec();
        let mut cf = vec![0.0; degree + 1];
        cf[k] = 1.0;
        let orig_norm = dot(&vec, &vec).sqrt();
        for _pass in 0..2 {
            for j in 0..k {
                let r = {
                    let qn = nodal.row(j);
                    dot(&vec, qn.to_slice().unwrap())
                };
                {
                    let qn = nodal.row(j);
                    for i in 0..n {
                        vec[i] -= r * qn[i];
                    }
                }
                let qc = coeffs.row(j).to_owned();
                for (c, q) in cf.iter_mut().zip(qc.iter()) {
                    *c -= r * q;
                }
            }
        }
        let norm = dot(&vec, &vec).sqrt();
        if !(norm > 1e-9 * orig_norm) {
            return Err(Error::BasisIllConditioned {
                loss: norm / orig_norm.max(f64::MIN_POSITIVE),
            });
        }
        for v in vec.iter_mut() {
            *v /= norm;
        }
        for c in cf.iter_mut() {
            *c /= norm;
        }
        nodal.row_mut(k).assign(&ndarray::ArrayView1::from(&vec[..]));
        coeffs.row_mut(k).assign(&ndarray::ArrayView1::from(&cf[..]));
    }

    // Orthogonality audit of the finished basis.
    let mut loss = 0.0f64;
    for a in 0..=degree {
        for b in a..=degree {
            let g = dot(
                nodal.row(a).to_slice().unwrap(),
                nodal.row(b).to_slice().unwrap(),
            );
            let target = if a == b { 1.0 } else { 0.0 };
            loss = loss.max((g - target).abs());
        }
    }
    if loss > 1e-6 {
        return Err(Error::BasisIllConditioned { loss });
    }

    Ok(GalerkinBasis {
        degree,
        coeffs,
        nodal,
    })
}

/// Assembles and solves the Galerkin eigenproblem, reporting the first
/// `n_eigen` nonzero eigenpairs.
pub fn solve_eigensystem(
    basis: &GalerkinBasis,
    rho: &StationaryDensity,
    sigma: f64,
    n_eigen: usize,
) -> Result<EigenSystem> {
    let k = basis.degree;
    if n_eigen == 0 || n_eigen > k - 1 {
        return Err(Error::InvalidConfig(format!(
            "requested {n_eigen} eigenpairs from a degree-{k} basis (need 1..={})",
            k - 1
        )));
    }
    let n = rho.len();
    let xs = rho.grid();
    let weights: Vec<f64> = (0..n).map(|i| rho.weight(i) * rho.values()[i]).collect();

    // Nodal derivative values from the coefficient rows.
    let mut dnodal = Array2::zeros((k + 1, n));
    for j in 0..=k {
        let dc = derivative(basis.coeffs.row(j).to_slice().unwrap());
        for i in 0..n {
            dnodal[(j, i)] = poly_eval(&dc, xs[i]);
        }
    }

    // Stiffness matrix; the mass matrix is the identity by orthonormality.
    let mut s = Array2::zeros((k + 1, k + 1));
    for a in 0..=k {
        for b in a..=k {
            let mut acc = 0.0;
            for i in 0..n {
                acc += weights[i] * dnodal[(a, i)] * dnodal[(b, i)];
            }
            let v = sigma * acc;
            s[(a, b)] = v;
            s[(b, a)] = v;
        }
    }

    let (eigvals, eigvecs) = jacobi_eigh(s)?;
    let mut order: Vec<usize> = (0..=k).collect();
    order.sort_by(|&a, &b| eigvals[a].total_cmp(&eigvals[b]));

    let lambda_max = eigvals[order[k]].abs().max(1.0);
    if eigvals[order[0]] < -1e-10 * lambda_max {
        return Err(Error::EigenAssembly(format!(
            "stiffness matrix has negative eigenvalue {}",
            eigvals[order[0]]
        )));
    }
    // The constant mode carries the zero eigenvalue; it is dropped from the
    // reported list.
    if eigvals[order[0]].abs() > 1e-8 * lambda_max {
        return Err(Error::EigenAssembly(format!(
            "no zero mode found; smallest eigenvalue {}",
            eigvals[order[0]]
        )));
    }

    let mut lambdas: Vec<f64> = Vec::with_capacity(n_eigen);
    let mut basis_coords = Vec::with_capacity(n_eigen);
    let mut monomial = Vec::with_capacity(n_eigen);
    for slot in 0..n_eigen {
        let idx = order[slot + 1];
        let lambda = eigvals[idx];
        if let Some(prev) = lambdas.last() {
            if lambda - prev < 1e-10 {
                return Err(Error::EigenAssembly(format!(
                    "eigenvalues {prev} and {lambda} are not strictly separated"
                )));
            }
        }
        let mut coords: Vec<f64> = (0..=k).map(|r| eigvecs[(r, idx)]).collect();
        let mut mono = vec![0.0; k + 1];
        for (r, &c) in coords.iter().enumerate() {
            for (t, m) in mono.iter_mut().enumerate() {
                *m += c * basis.coeffs[(r, t)];
            }
        }
        if leading_coefficient(&mono) < 0.0 {
            for c in coords.iter_mut() {
                *c = -*c;
            }
            for m in mono.iter_mut() {
                *m = -*m;
            }
        }
        lambdas.push(lambda);
        basis_coords.push(coords);
        monomial.push(mono);
    }

    Ok(EigenSystem {
        lambdas,
        basis_coords,
        monomial,
        rho: rho.clone(),
        sigma,
    })
}

/// Highest-degree coefficient that rises above the numerical noise floor.
fn leading_coefficient(coeffs: &[f64]) -> f64 {
    let max_abs = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    for &c in coeffs.iter().rev() {
        if c.abs() > 1e-8 * max_abs {
            return c;
        }
    }
    0.0
}

/// Full pipeline: density under the closure policy, then basis, then solve.
pub fn build_eigensystem(
    system: &SystemSpec,
    closure: &MomentClosure,
    density_opts: &DensityOptions,
    spectral_opts: &SpectralOptions,
) -> Result<EigenSystem> {
    let rho = build_density(system, closure, density_opts)?;
    let basis = build_basis(&rho, spectral_opts.basis_degree)?;
    solve_eigensystem(&basis, &rho, system.sigma, spectral_opts.n_eigen)
}

/// Re-solves the full pipeline at `theta +/- step * direction`.
///
/// The sign convention of `solve_eigensystem` makes the two systems directly
/// comparable, so central differences of eigenvalues and eigenfunctions are
/// well defined.
pub fn eigensystem_with_perturbed_theta(
    system: &SystemSpec,
    theta: &ThetaVector,
    direction: &[f64],
    step: f64,
    closure: &MomentClosure,
    density_opts: &DensityOptions,
    spectral_opts: &SpectralOptions,
) -> Result<(EigenSystem, EigenSystem)> {
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "perturbation step must be positive, got {step}"
        )));
    }
    if direction.len() != theta.len() {
        return Err(Error::InvalidConfig(format!(
            "direction has {} components, theta has {}",
            direction.len(),
            theta.len()
        )));
    }
    let flat = theta.to_flat();
    let build_at = |sign: f64| -> Result<EigenSystem> {
        let shifted: Vec<f64> = flat
            .iter()
            .zip(direction)
            .map(|(t, d)| t + sign * step * d)
            .collect();
        let theta_s = ThetaVector::from_flat(theta, &shifted)?;
        let sys = system.apply_theta(&theta_s)?;
        build_eigensystem(&sys, closure, density_opts, spectral_opts)
    };
    Ok((build_at(1.0)?, build_at(-1.0)?))
}

/// Cyclic Jacobi rotations for a dense symmetric matrix.
///
/// Returns eigenvalues and the orthogonal matrix of column eigenvectors;
/// deterministic and dependency-free, adequate for the basis sizes used here.
pub(crate) fn jacobi_eigh(mut a: Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::EigenAssembly("matrix is not square".into()));
    }
    let mut v = Array2::eye(n);
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-12 * (1.0 + frob);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += 2.0 * a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() < tol {
            let eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
            return Ok((eig, v));
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = 0.5 * (a[(q, q)] - a[(p, p)]) / apq;
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for r in 0..n {
                    let arp = a[(r, p)];
                    let arq = a[(r, q)];
                    a[(r, p)] = c * arp - s * arq;
                    a[(r, q)] = s * arp + c * arq;
                }
                for r in 0..n {
                    let apr = a[(p, r)];
                    let aqr = a[(q, r)];
                    a[(p, r)] = c * apr - s * aqr;
                    a[(q, r)] = s * apr + c * aqr;
                }
                for r in 0..n {
                    let vrp = v[(r, p)];
                    let vrq = v[(r, q)];
                    v[(r, p)] = c * vrp - s * vrq;
                    v[(r, q)] = s * vrp + c * vrq;
                }
            }
        }
    }
    Err(Error::EigenAssembly(
        "Jacobi iteration did not reach the off-diagonal tolerance".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::invariant::{build_density_given_moment, DensityOptions};
    use crate::potentials::{BasisTerm, ConfiningPotential, InteractionPotential};
    use crate::simulator::{simulate_stationary_linearized, SimConfig};

    fn ou_system(kappa: f64, sigma: f64) -> SystemSpec {
        SystemSpec::new(
            ConfiningPotential::quadratic(),
            InteractionPotential::quadratic(kappa),
            sigma,
        )
        .unwrap()
    }

    fn density_of(sys: &SystemSpec) -> StationaryDensity {
        build_density_given_moment(sys, 0.0, &DensityOptions::default()).unwrap()
    }

    #[test]
    fn gaussian_basis_reproduces_hermite_polynomials() {
        let sys = ou_system(0.0, 1.0); // standard Gaussian weight
        let rho = density_of(&sys);
        let basis = build_basis(&rho, 3).unwrap();
        // p2 is proportional to x^2 - 1.
        let c = basis.coefficients(2);
        assert!((c[0] / c[2] + 1.0).abs() < 1e-7, "p2 coeffs {c:?}");
        assert!(c[1].abs() < 1e-7 * c[2].abs());
        // p0 is the constant 1.
        let c0 = basis.coefficients(0);
        assert!((c0[0] - 1.0).abs() < 1e-9);
        assert!(c0[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn reduced_variance_weight_shifts_the_hermite_root() {
        let sys = ou_system(0.5, 1.0); // variance 2/3
        let rho = density_of(&sys);
        let basis = build_basis(&rho, 2).unwrap();
        let c = basis.coefficients(2);
        assert!((c[0] / c[2] + 2.0 / 3.0).abs() < 1e-7, "p2 coeffs {c:?}");
    }

    #[test]
    fn first_two_basis_functions_are_orthogonal() {
        let sys = ou_system(0.5, 1.0);
        let rho = density_of(&sys);
        let basis = build_basis(&rho, 8).unwrap();
        let mut acc = 0.0;
        for i in 0..rho.len() {
            let x = rho.grid()[i];
            acc += rho.weight(i)
                * rho.values()[i]
                * poly_eval(basis.coefficients(0), x)
                * poly_eval(basis.coefficients(1), x);
        }
        assert!(acc.abs() < 1e-10);
    }

    #[test]
    fn ou_eigenvalues_are_multiples_of_one_plus_kappa() {
        let sys = ou_system(0.5, 1.0);
        let rho = density_of(&sys);
        let basis = build_basis(&rho, 30).unwrap();
        let eig = solve_eigensystem(&basis, &rho, 1.0, 2).unwrap();
        assert!((eig.lambda(1).unwrap() - 1.5).abs() < 1.5e-8);
        assert!((eig.lambda(2).unwrap() - 3.0).abs() < 3.0e-8);
    }

    #[test]
    fn pure_confinement_spectrum_is_the_integer_ladder() {
        let sys = ou_system(0.0, 1.0);
        let rho = density_of(&sys);
        let basis = build_basis(&rho, 20).unwrap();
        let eig = solve_eigensystem(&basis, &rho, 1.0, 4).unwrap();
        for j in 1..=4usize {
            let l = eig.lambda(j).unwrap();
            assert!(
                (l - j as f64).abs() < 1e-7 * j as f64,
                "lambda_{j} = {l}"
            );
        }
    }

    #[test]
    fn second_eigenfunction_matches_the_shifted_parabola() {
        let sys = ou_system(0.5, 1.0);
        let rho = density_of(&sys);
        let basis = build_basis(&rho, 30).unwrap();
        let eig = solve_eigensystem(&basis, &rho, 1.0, 2).unwrap();
        // Cosine similarity with x^2 - 2/3 on the grid.
        let mut dot = 0.0;
        let mut n1 = 0.0;
        let mut n2 = 0.0;
        for i in 0..rho.len() {
            let x = rho.grid()[i];
            let w = rho.weight(i) * rho.values()[i];
            let a = eval_eigenfunction(&eig, 2, x).unwrap();
            let b = x * x - 2.0 / 3.0;
            dot += w * a * b;
            n1 += w * a * a;
            n2 += w * b * b;
        }
        let cos = dot.abs() / (n1 * n2).sqrt();
        assert!(cos > 1.0 - 1e-8, "cosine similarity {cos}");
        // Roots at +/- sqrt(2/3), up to normalization.
        let r = (2.0f64 / 3.0).sqrt();
        assert!(eval_eigenfunction(&eig, 2, r).unwrap().abs() < 1e-8);
        assert!(eval_eigenfunction(&eig, 2, -r).unwrap().abs() < 1e-8);
        // Odd first mode vanishes at the origin.
        assert!(eval_eigenfunction(&eig, 1, 0.0).unwrap().abs() < 1e-10);
    }

    #[test]
    fn rayleigh_quotient_and_orthonormality() {
        let v = ConfiningPotential::new(
            vec![BasisTerm::new(0.25, 4), BasisTerm::new(-0.5, 2)],
            vec![1.0, 2.0],
        )
        .unwrap();
        let sys = SystemSpec::new(v, InteractionPotential::quadratic(0.5), 0.75).unwrap();
        let rho = density_of(&sys);
        let basis = build_basis(&rho, 20).unwrap();
        let eig = solve_eigensystem(&basis, &rho, 0.75, 3).unwrap();

        for j in 1..=3usize {
            let cj = eig.phi_coefficients(j).unwrap().to_vec();
            let dj = derivative(&cj);
            let mut stiff = 0.0;
            for i in 0..rho.len() {
                let x = rho.grid()[i];
                let w = rho.weight(i) * rho.values()[i];
                let d = poly_eval(&dj, x);
                stiff += w * d * d;
            }
            let lambda = eig.lambda(j).unwrap();
            assert!(
                (0.75 * stiff - lambda).abs() < 1e-8 * lambda.max(1.0),
                "Rayleigh mismatch at j={j}"
            );
            for l in 1..=3usize {
                let mut g = 0.0;
                for i in 0..rho.len() {
                    let x = rho.grid()[i];
                    let w = rho.weight(i) * rho.values()[i];
                    g += w
                        * eval_eigenfunction(&eig, j, x).unwrap()
                        * eval_eigenfunction(&eig, l, x).unwrap();
                }
                let target = if j == l { 1.0 } else { 0.0 };
                assert!((g - target).abs() < 1e-8, "<phi_{j}, phi_{l}> = {g}");
            }
        }
    }

    #[test]
    fn nodal_values_match_the_monomial_expansion() {
        let sys = ou_system(0.5, 1.0);
        let rho = density_of(&sys);
        let basis = build_basis(&rho, 10).unwrap();
        let eig = solve_eigensystem(&basis, &rho, 1.0, 2).unwrap();
        // Reconstruct phi_1 nodally from basis coordinates and compare with
        // the Horner evaluation of its monomial expansion.
        for (i, &x) in rho.grid().iter().enumerate().step_by(97) {
            let mut nodal = 0.0;
            for (r, c) in eig.phi_basis_coordinates(1).unwrap().iter().enumerate() {
                nodal += c * basis.nodal_values(r)[i];
            }
            let horner = eval_eigenfunction(&eig, 1, x).unwrap();
            assert!((nodal - horner).abs() < 1e-9, "node {i}");
        }
    }

    #[test]
    fn eigen_index_bounds_are_enforced() {
        let sys = ou_system(0.5, 1.0);
        let rho = density_of(&sys);
        let basis = build_basis(&rho, 10).unwrap();
        let eig = solve_eigensystem(&basis, &rho, 1.0, 2).unwrap();
        assert!(eval_eigenfunction(&eig, 0, 1.0).is_err());
        assert!(eval_eigenfunction(&eig, 3, 1.0).is_err());
        assert!(solve_eigensystem(&basis, &rho, 1.0, 10).is_err());
    }

    #[test]
    fn degree_refinement_leaves_lambda_one_unchanged() {
        let sys = ou_system(0.5, 1.0);
        let rho = density_of(&sys);
        let b20 = build_basis(&rho, 20).unwrap();
        let b30 = build_basis(&rho, 30).unwrap();
        let l20 = solve_eigensystem(&b20, &rho, 1.0, 1)
            .unwrap()
            .lambda(1)
            .unwrap();
        let l30 = solve_eigensystem(&b30, &rho, 1.0, 1)
            .unwrap()
            .lambda(1)
            .unwrap();
        assert!((l20 - l30).abs() < 1e-6, "{l20} vs {l30}");
    }

    #[test]
    fn perturbed_eigenvalues_recover_the_kappa_slopes() {
        let sys = ou_system(0.5, 1.0);
        let theta = ThetaVector::new(vec![], vec![0.5], None).unwrap();
        let step = 1e-4;
        let (plus, minus) = eigensystem_with_perturbed_theta(
            &sys,
            &theta,
            &[1.0],
            step,
            &MomentClosure::SelfConsistent { m0: 0.0 },
            &DensityOptions::default(),
            &SpectralOptions {
                basis_degree: 20,
                n_eigen: 2,
            },
        )
        .unwrap();
        let d1 = (plus.lambda(1).unwrap() - minus.lambda(1).unwrap()) / (2.0 * step);
        let d2 = (plus.lambda(2).unwrap() - minus.lambda(2).unwrap()) / (2.0 * step);
        assert!((d1 - 1.0).abs() < 1e-6, "dlambda1/dkappa = {d1}");
        assert!((d2 - 2.0).abs() < 1e-6, "dlambda2/dkappa = {d2}");
    }

    #[test]
    fn zero_step_is_rejected() {
        let sys = ou_system(0.5, 1.0);
        let theta = ThetaVector::new(vec![], vec![0.5], None).unwrap();
        let res = eigensystem_with_perturbed_theta(
            &sys,
            &theta,
            &[1.0],
            0.0,
            &MomentClosure::SelfConsistent { m0: 0.0 },
            &DensityOptions::default(),
            &SpectralOptions::default(),
        );
        assert!(res.is_err());
    }

    #[test]
    fn martingale_identity_holds_on_binned_stationary_pairs() {
        let sys = ou_system(0.5, 1.0);
        let rho = density_of(&sys);
        let basis = build_basis(&rho, 20).unwrap();
        let eig = solve_eigensystem(&basis, &rho, 1.0, 2).unwrap();
        let cfg = SimConfig {
            n_particles: 1,
            t_final: 1.0,
            h: 0.005,
            sigma: 1.0,
            seed: 4242,
            initial_value: 0.0,
        };
        let delta = 1.0;
        let pairs = simulate_stationary_linearized(
            &cfg,
            &sys.confining,
            &sys.interaction,
            &rho,
            40_000,
            delta,
        )
        .unwrap();

        let mut sorted = pairs.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n_bins = 8;
        let per = sorted.len() / n_bins;
        for j in 1..=2usize {
            let lambda = eig.lambda(j).unwrap();
            let decay = (-lambda * delta).exp();
            for b in 0..n_bins {
                let chunk = &sorted[b * per..(b + 1) * per];
                let mut mean = 0.0;
                let mut sq = 0.0;
                for (x, y) in chunk {
                    let r = eval_eigenfunction(&eig, j, *y).unwrap()
                        - decay * eval_eigenfunction(&eig, j, *x).unwrap();
                    mean += r;
                    sq += r * r;
                }
                let m = mean / chunk.len() as f64;
                let var = (sq / chunk.len() as f64 - m * m).max(0.0);
                let se = (var / chunk.len() as f64).sqrt();
                assert!(
                    m.abs() <= 3.0 * se.max(1e-12),
                    "j={j}, bin {b}: residual {m} vs se {se}"
                );
            }
        }
    }

    #[test]
    fn eigen_csv_has_one_row_per_pair() {
        let sys = ou_system(0.5, 1.0);
        let rho = density_of(&sys);
        let basis = build_basis(&rho, 10).unwrap();
        let eig = solve_eigensystem(&basis, &rho, 1.0, 2).unwrap();
        let mut buf = Vec::new();
        eig.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("j,lambda,c0"));
    }
}
