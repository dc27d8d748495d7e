//! End-to-end checks that cut across modules: ensemble-averaged estimation,
//! asymptotic normality of the standardized estimates, and the CLI surface.

use std::process::Command;

use mfsde::estimator::{
    estimate_over_particles, EstimatingContext, MomentSource, PsiSpec, SolveOptions,
};
use mfsde::invariant::DensityOptions;
use mfsde::potentials::{ConfiningPotential, InteractionPotential, SystemSpec, ThetaVector};
use mfsde::simulator::{simulate_ensemble_strided, subsample, SimConfig};
use mfsde::spectral::SpectralOptions;
use mfsde::stats;

fn ou_system(kappa: f64) -> SystemSpec {
    SystemSpec::new(
        ConfiningPotential::quadratic(),
        InteractionPotential::quadratic(kappa),
        1.0,
    )
    .unwrap()
}

fn ou_context(delta: f64, basis_degree: usize) -> EstimatingContext {
    EstimatingContext::new(
        ou_system(0.5),
        ThetaVector::new(vec![], vec![0.5], None).unwrap(),
        PsiSpec::monomial(1),
        delta,
        MomentSource::SelfConsistent { m0: 0.0 },
        DensityOptions {
            nodes: 1201,
            ..DensityOptions::default()
        },
        SpectralOptions {
            basis_degree,
            n_eigen: 1,
        },
    )
    .unwrap()
}

#[test]
fn particle_averaged_estimate_matches_theory() {
    let cfg = SimConfig {
        n_particles: 250,
        t_final: 1000.0,
        h: 0.01,
        sigma: 1.0,
        seed: 7171,
        initial_value: 0.0,
    };
    let path = simulate_ensemble_strided(
        &cfg,
        &ConfiningPotential::quadratic(),
        &InteractionPotential::quadratic(0.5),
        100,
    )
    .unwrap();
    let ctx = ou_context(1.0, 12);
    let init = ThetaVector::new(vec![], vec![0.25], None).unwrap();
    let opts = SolveOptions::with_box(vec![(-0.9, 2.0)]);
    let report = estimate_over_particles(&ctx, &path, &init, &opts).unwrap();

    let mean = report.theta_hat.kappa[0];
    assert!((mean - 0.5).abs() < 0.05, "averaged estimate {mean}");

    // Per-particle spread tracks sqrt(Gamma_0 / M) with Gamma_0 = e^3 - 1.
    let per: Vec<f64> = report
        .per_particle
        .as_ref()
        .unwrap()
        .iter()
        .filter_map(|e| e.theta_hat.as_ref().map(|t| t.kappa[0]))
        .collect();
    assert!(per.len() > 240, "{} converged particles", per.len());
    let spread = stats::sample_variance(&per).sqrt();
    let predicted = (((3.0f64).exp() - 1.0) / 1000.0).sqrt();
    assert!(
        spread > 0.7 * predicted && spread < 1.4 * predicted,
        "spread {spread} vs predicted {predicted}"
    );
}

#[test]
fn single_particle_ensemble_average_is_the_single_estimate() {
    let cfg = SimConfig {
        n_particles: 1,
        t_final: 400.0,
        h: 0.01,
        sigma: 1.0,
        seed: 22,
        initial_value: 0.0,
    };
    let path = simulate_ensemble_strided(
        &cfg,
        &ConfiningPotential::quadratic(),
        &InteractionPotential::quadratic(0.5),
        100,
    )
    .unwrap();
    let ctx = ou_context(1.0, 12);
    let init = ThetaVector::new(vec![], vec![0.3], None).unwrap();
    let opts = SolveOptions::with_box(vec![(-0.9, 2.0)]);
    let avg = estimate_over_particles(&ctx, &path, &init, &opts).unwrap();
    let obs = subsample(&path, 1.0, 0).unwrap();
    let single = mfsde::estimator::solve(&ctx, &obs, &init, &opts).unwrap();
    assert_eq!(avg.theta_hat.kappa[0], single.theta_hat.kappa[0]);
}

#[test]
fn standardized_estimates_are_asymptotically_normal() {
    // 1024 near-independent single-particle estimates at a sample size where
    // the normal regime has set in.
    let m = 8000usize;
    let cfg = SimConfig {
        n_particles: 1024,
        t_final: m as f64,
        h: 0.02,
        sigma: 1.0,
        seed: 424243,
        initial_value: 0.0,
    };
    let path = simulate_ensemble_strided(
        &cfg,
        &ConfiningPotential::quadratic(),
        &InteractionPotential::quadratic(0.5),
        50,
    )
    .unwrap();
    let gamma: f64 = (3.0f64).exp() - 1.0;
    let scale = (m as f64 / gamma).sqrt();
    let mut zs = Vec::with_capacity(1024);
    for n in 0..1024 {
        let obs = subsample(&path, 1.0, n).unwrap();
        if let Ok(k) = mfsde::estimator::closed_form_ou(&obs) {
            zs.push(scale * (k - 0.5));
        }
    }
    assert!(zs.len() > 1000, "{} usable estimates", zs.len());
    let skew = stats::skewness(&zs);
    let kurt = stats::excess_kurtosis(&zs);
    assert!(skew.abs() < 0.25, "skewness {skew}");
    assert!(kurt.abs() < 0.5, "excess kurtosis {kurt}");
    let var = stats::sample_variance(&zs);
    assert!((var - 1.0).abs() < 0.2, "standardized variance {var}");
}

#[test]
fn chaos_check_rejects_a_single_grid_point() {
    let text = mfsde::harness::preset("chaos_check")
        .unwrap()
        .replace("n_values = [50, 100, 200, 400, 800]", "n_values = [100]");
    let cfg = mfsde::harness::ExperimentConfig::from_toml(&text).unwrap();
    assert!(mfsde::harness::run_experiment(&cfg, "chaos_mini").is_err());
}

#[test]
fn j_sweep_estimates_agree() {
    // Full preset scale: with fewer observations the second estimating
    // function (psi_2 = x^3 against the even second eigenfunction) carries
    // too little sensitivity and its root solve becomes unreliable.
    let cfg = mfsde::harness::ExperimentConfig::from_toml(
        mfsde::harness::preset("ou_sensitivity_j").unwrap(),
    )
    .unwrap();
    let outcome = mfsde::harness::run_experiment(&cfg, "j_sweep").unwrap();
    assert!(outcome.all_points_ok);
    let diff = outcome.summary["checks"]["max_pairwise_difference"]
        .as_f64()
        .unwrap();
    assert!(
        diff < 0.05,
        "J = 1, 2, 3 grand means differ by {diff}"
    );
}

#[test]
fn doubling_realizations_shrinks_the_error_scatter() {
    // Scatter of per-realization mean absolute errors, grouped into blocks
    // of 4 and of 8: the block-mean spread should shrink by about sqrt(2).
    let per_realization: Vec<f64> = (0..96)
        .map(|l| {
            let cfg = SimConfig {
                n_particles: 32,
                t_final: 250.0,
                h: 0.01,
                sigma: 1.0,
                seed: mfsde::harness::realization_seed(31337, l),
                initial_value: 0.0,
            };
            let path = simulate_ensemble_strided(
                &cfg,
                &ConfiningPotential::quadratic(),
                &InteractionPotential::quadratic(0.5),
                100,
            )
            .unwrap();
            let errs: Vec<f64> = (0..32)
                .filter_map(|n| {
                    let obs = subsample(&path, 1.0, n).unwrap();
                    mfsde::estimator::closed_form_ou(&obs)
                        .ok()
                        .map(|k| (k - 0.5).abs())
                })
                .collect();
            stats::mean(&errs)
        })
        .collect();
    let spread_of_blocks = |size: usize| -> f64 {
        let means: Vec<f64> = per_realization
            .chunks(size)
            .map(stats::mean)
            .collect();
        stats::sample_variance(&means).sqrt()
    };
    let s4 = spread_of_blocks(4);
    let s8 = spread_of_blocks(8);
    let ratio = s4 / s8;
    assert!(
        ratio > 1.05 && ratio < 2.2,
        "expected roughly sqrt(2) shrinkage, got {ratio} ({s4} -> {s8})"
    );
}

#[test]
fn cli_lists_presets_and_reruns_byte_identically() {
    let bin = env!("CARGO_BIN_EXE_mfsde");
    let list = Command::new(bin).arg("list").output().unwrap();
    assert!(list.status.success());
    let names = String::from_utf8(list.stdout).unwrap();
    assert!(names.lines().any(|l| l == "chaos_check"));
    assert!(names.lines().count() >= 10);

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        let out = Command::new(bin)
            .args(["run", "chaos_check", "--out"])
            .arg(dir.path())
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(dir_a.path().join("chaos_check.csv")).unwrap();
    let b = std::fs::read(dir_b.path().join("chaos_check.csv")).unwrap();
    assert_eq!(a, b);
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir_a.path().join("chaos_check_summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["all_points_ok"], serde_json::json!(true));
}

#[test]
fn cli_runs_a_config_file_and_honors_overrides() {
    let bin = env!("CARGO_BIN_EXE_mfsde");
    let dir = tempfile::tempdir().unwrap();
    let config = r#"
experiment = "sensitivity_mn"
seed = 11
realizations = 2

[model]
sigma = 1.0
confining = { scales = [0.5], exponents = [2], params = [1.0] }
interaction = { kind = "quadratic", kappa = 0.5 }

[sim]
n_particles = 16
m_observations = 100
h = 0.01
delta = 1.0

[estimate]
free = ["kappa"]
psi = [[[1]]]
moment_source = "self_consistent"
theta_init = [0.25]
theta_box = [[-0.9, 2.0]]
use_closed_form = true

[grid]
m_values = [50, 100]
n_values = [8, 16]
"#;
    let cfg_path = dir.path().join("mini.toml");
    std::fs::write(&cfg_path, config).unwrap();
    let out = Command::new(bin)
        .args(["run"])
        .arg(&cfg_path)
        .args(["--out"])
        .arg(dir.path())
        .args(["--seed", "99", "--burn-in", "2.0", "--threads", "1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("mini.csv")).unwrap();
    // The echoed config reflects the overrides.
    assert!(csv.contains("# seed = 99"));
    assert!(csv.contains("# burn_in = 2.0"));
    assert!(csv.lines().filter(|l| !l.starts_with('#')).count() > 4);

    // An unknown target fails cleanly.
    let bad = Command::new(bin)
        .args(["run", "not_a_preset"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
