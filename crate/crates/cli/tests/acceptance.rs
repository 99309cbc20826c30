//! The ten acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`); the process exits non-zero
//! when any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{brute, closed_forms, gradients};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use poquim_core::inference::DEFAULT_LEVELS;
use poquim_core::likelihood::reml_expected_hessian;
use poquim_core::simulation::draw_response;
use poquim_core::{
    analytic_quim_reml, classify_quadruples, fit_reml, mc_poquim_check, poquim_reml, Criterion, DesignSpec, Family,
    FitOptions, FixedEffects, HigherMoments, HypothesisConfig, ModelSpec, Study, StudyConfig, TestMethod, Truth,
    VarianceComponents,
};
use rayon::prelude::*;
use serde_json::Value;
use tempfile::TempDir;

type Check = fn() -> Result<String, String>;

struct Acceptance {
    id: usize,
    name: &'static str,
    budget: Duration,
    check: Check,
}

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_fidelity() -> Result<String, String> {
    gradients::reml_score_matches_finite_differences();
    gradients::ml_score_matches_finite_differences();
    gradients::expected_hessians_match_trace_products();
    Ok(format!("{} models", gradients::random_models().len()))
}

fn poquim_mean(criterion: Criterion) -> Result<f64, String> {
    let design = Arc::new(DesignSpec::OneWay { m: 3, n: 2 }.build().map_err(|e| e.to_string())?);
    let theta = VarianceComponents::new(1.0, vec![1.0]).unwrap();
    let beta = FixedEffects::new(DVector::from_element(1, 1.0)).unwrap();
    let families = [Family::CenteredExponential, Family::CenteredExponential];
    let check = mc_poquim_check(&theta, &beta, &design, &families, criterion, 10_000, 11).map_err(|e| e.to_string())?;
    Ok(check.max_abs_z())
}

fn decomposition_identity() -> Result<String, String> {
    let reml = poquim_mean(Criterion::Reml)?;
    let ml = poquim_mean(Criterion::Ml)?;
    ensure(reml <= 3.0 && ml <= 3.0, format!("max |z| REML {reml:.2}, ML {ml:.2}"))
}

fn closed_form_fixtures() -> Result<String, String> {
    closed_forms::one_way_reml_observed_and_estimated_parts();
    closed_forms::one_way_sandwich_entry_matches_rational_form();
    closed_forms::null_reml_lambda_closed_form();
    closed_forms::one_way_chi_square_statistic_matches_closed_form();
    closed_forms::one_way_ml_blocks();
    closed_forms::one_way_ml_gamma_gamma_estimated_part_has_negative_sign();
    closed_forms::crossed_lambda_entry_splits_into_observed_and_estimated_forms();
    Ok("7 fixtures".into())
}

fn index_classes() -> Result<String, String> {
    brute::sparse_enumeration_matches_dense_oracle();
    brute::crossed_cardinalities();
    Ok(format!("{} templates", brute::templates().len()))
}

fn one_way_study(m: usize, gamma: f64, methods: Vec<TestMethod>, replicates: usize, seed: u64) -> StudyConfig {
    StudyConfig {
        name: format!("one-way m={m}, γ₁={gamma}"),
        design: DesignSpec::OneWay { m, n: 2 },
        truth: Truth {
            beta: vec![1.0],
            lambda: 1.0,
            gamma: vec![gamma],
        },
        distributions: vec![Family::Normal, Family::Normal],
        hypothesis: HypothesisConfig {
            k: vec![vec![0.0, 1.0]],
            phi: vec![1.0],
            null_substitution: true,
        },
        methods,
        nominal_levels: DEFAULT_LEVELS.to_vec(),
        replicates,
        master_seed: seed,
        fit: FitOptions::default(),
    }
}

fn rate(config: StudyConfig, method: TestMethod) -> Result<(f64, f64), String> {
    let result = Study::new(config).map_err(|e| e.to_string())?.run();
    let summary = result.method(method).ok_or("method missing")?;
    let r = summary.rate_at(0.05).ok_or("level missing")?;
    Ok((r.rate, r.se))
}

fn one_way_size() -> Result<String, String> {
    let both = vec![TestMethod::PoquimChi2, TestMethod::JackknifeT];
    let study = Study::new(one_way_study(400, 1.0, both, 2000, 20240601)).map_err(|e| e.to_string())?.run();
    let at = |m: TestMethod| study.method(m).and_then(|s| s.rate_at(0.05)).map(|r| r.rate).ok_or("missing rate");
    let poquim = at(TestMethod::PoquimChi2)?;
    let jack = at(TestMethod::JackknifeT)?;
    let (small, _) = rate(one_way_study(50, 1.0, vec![TestMethod::PoquimChi2], 2000, 20240602), TestMethod::PoquimChi2)?;
    let inside = |v: f64, lo: f64, hi: f64| (lo..=hi).contains(&v);
    ensure(
        inside(poquim, 0.040, 0.070) && inside(jack, 0.040, 0.070) && inside(small, 0.050, 0.090),
        format!("II-i POQUIM {poquim:.4}, jackknife {jack:.4}; I-i POQUIM {small:.4}"),
    )
}

fn one_way_power() -> Result<String, String> {
    let poquim = vec![TestMethod::PoquimChi2];
    let (low, _) = rate(one_way_study(400, 0.2, poquim.clone(), 1000, 20240603), TestMethod::PoquimChi2)?;
    let (high, _) = rate(one_way_study(400, 2.0, poquim, 1000, 20240604), TestMethod::PoquimChi2)?;
    ensure(low >= 0.99 && high >= 0.97, format!("power γ₁=0.2 {low:.4}, γ₁=2 {high:.4}"))
}

fn two_way_study(gamma2: f64, seed: u64) -> StudyConfig {
    StudyConfig {
        name: format!("two-way 40×40, γ₂={gamma2}"),
        design: DesignSpec::TwoWay { m: 40, n: 40 },
        truth: Truth {
            beta: vec![1.0],
            lambda: 1.0,
            gamma: vec![1.0, gamma2],
        },
        distributions: vec![Family::Normal; 3],
        hypothesis: HypothesisConfig {
            k: vec![vec![0.0, 1.0, -1.0]],
            phi: vec![0.0],
            null_substitution: false,
        },
        methods: vec![TestMethod::PoquimChi2],
        nominal_levels: DEFAULT_LEVELS.to_vec(),
        replicates: 1000,
        master_seed: seed,
        fit: FitOptions::default(),
    }
}

fn two_way_size_power() -> Result<String, String> {
    let (size, _) = rate(two_way_study(1.0, 20240605), TestMethod::PoquimChi2)?;
    let (power, _) = rate(two_way_study(5.0, 20240606), TestMethod::PoquimChi2)?;
    ensure(
        (0.050..=0.095).contains(&size) && power >= 0.97,
        format!("size {size:.4}, power at γ₂/γ₁=5 {power:.4}"),
    )
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * root * eig.eigenvectors.transpose()
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.amax()
}

/// Median of `‖𝒢^{1/2}(Σ̂ − Σ)𝒢^{1/2}‖₂` over replicates of a one-way
/// `m × 2` layout with double-exponential effects and normal errors.
fn median_acm_error(m: usize, replicates: u64, seed: u64) -> Result<f64, String> {
    let design = Arc::new(DesignSpec::OneWay { m, n: 2 }.build().map_err(|e| e.to_string())?);
    let theta = VarianceComponents::new(1.0, vec![1.0]).unwrap();
    let beta = DVector::from_element(1, 1.0);
    let families = [Family::Normal, Family::DoubleExponential];
    let moments = HigherMoments::from_families(&theta, &families).map_err(|e| e.to_string())?;
    let q = analytic_quim_reml(&theta, &moments, &design).map_err(|e| e.to_string())?;
    let probe = ModelSpec::new(DVector::zeros(design.n_obs()), Arc::clone(&design)).unwrap();
    let info = -reml_expected_hessian(&theta, &probe).map_err(|e| e.to_string())?;
    let info_inv = info.clone().try_inverse().ok_or("singular information")?;
    let target = &info_inv * q * &info_inv;
    let root = sym_sqrt(&info);
    let quads = classify_quadruples(&design).map_err(|e| e.to_string())?;
    let mut errors: Vec<f64> = (0..replicates)
        .into_par_iter()
        .filter_map(|r| {
            let y = draw_response(&design, &beta, &theta, &families, seed, r);
            let model = ModelSpec::new(y, Arc::clone(&design)).ok()?;
            let fit = fit_reml(&model, &FitOptions::default()).ok()?;
            if !fit.converged || fit.any_boundary() {
                return None;
            }
            let d = poquim_reml(&fit.theta_hat, &fit.beta_hat, &model, &quads).ok()?;
            let i2_inv = d.i2.clone().try_inverse()?;
            let sigma = &i2_inv * &d.total * &i2_inv;
            let gap = &sigma - &target;
            let sym = (&gap + gap.transpose()) * 0.5;
            Some(spectral_norm(&(&root * sym * &root)))
        })
        .collect();
    if errors.len() * 10 < replicates as usize * 9 {
        return Err(format!("m={m}: only {} usable replicates", errors.len()));
    }
    errors.sort_by(f64::total_cmp);
    Ok(errors[errors.len() / 2])
}

fn consistency_trend() -> Result<String, String> {
    let medians = [50, 200, 800]
        .iter()
        .map(|&m| median_acm_error(m, 200, 20240607))
        .collect::<Result<Vec<_>, _>>()?;
    ensure(
        medians.windows(2).all(|w| w[1] < w[0]),
        format!("medians {:.4} > {:.4} > {:.4}", medians[0], medians[1], medians[2]),
    )
}

fn symmetric_law() -> Result<String, String> {
    let design = Arc::new(DesignSpec::OneWay { m: 4, n: 3 }.build().map_err(|e| e.to_string())?);
    let theta = VarianceComponents::new(1.0, vec![1.0]).unwrap();
    let beta = FixedEffects::new(DVector::from_element(1, 1.0)).unwrap();
    let families = [Family::DoubleExponential, Family::DoubleExponential];
    let check =
        mc_poquim_check(&theta, &beta, &design, &families, Criterion::Ml, 5000, 20240608).map_err(|e| e.to_string())?;
    let z: Vec<f64> = (1..check.z.ncols()).map(|k| check.z[(0, k)]).collect();
    let analytic_zero = (1..check.z.ncols()).all(|k| check.analytic[(0, k)] == 0.0);
    ensure(
        analytic_zero && z.iter().all(|v| v.abs() <= 3.0),
        format!("βθ z = [{}]", z.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(", ")),
    )
}

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

/// Copies a shipped config into `dir`, rewriting relative data paths and
/// applying `edit`.
fn staged(dir: &Path, name: &str, edit: impl FnOnce(&mut Value)) -> Result<PathBuf, String> {
    let text = fs::read_to_string(shipped(name)).map_err(|e| e.to_string())?;
    let mut config: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    if let Some(path) = config.pointer_mut("/data/path") {
        let absolute = shipped("").join(path.as_str().unwrap_or_default());
        *path = Value::String(absolute.to_string_lossy().into_owned());
    }
    edit(&mut config);
    let out = dir.join(name);
    fs::write(&out, config.to_string()).map_err(|e| e.to_string())?;
    Ok(out)
}

fn run_twice(dir: &Path, command: &str, config: &Path) -> Result<bool, String> {
    let mut outputs = Vec::new();
    for round in 0..2 {
        let out = dir.join(format!("{command}-{round}.json"));
        let status = Command::new(env!("CARGO_BIN_EXE_poquim"))
            .args([command, "--config"])
            .arg(config)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("{command} exited {:?}: {}", status.status.code(), String::from_utf8_lossy(&status.stderr)));
        }
        let json = fs::read(&out).map_err(|e| e.to_string())?;
        let tsv = fs::read(out.with_extension("tsv")).map_err(|e| e.to_string())?;
        outputs.push((json, tsv));
    }
    Ok(outputs[0] == outputs[1])
}

fn reproducibility() -> Result<String, String> {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let runs = [
        ("simulate", staged(dir.path(), "oneway_size.json", |c| c["simulate"]["replicates"] = 20.into())?),
        ("fit", staged(dir.path(), "fit_oneway.json", |_| ())?),
        ("fit", staged(dir.path(), "fit_growth_ml.json", |_| ())?),
        ("test", staged(dir.path(), "test_oneway.json", |_| ())?),
        ("test", staged(dir.path(), "jackknife_oneway.json", |_| ())?),
        ("oracle-check", staged(dir.path(), "oracle_oneway_ce.json", |c| c["oracle"]["replicates"] = 500.into())?),
    ];
    let mut differing = Vec::new();
    for (i, (command, config)) in runs.iter().enumerate() {
        let sub = dir.path().join(i.to_string());
        fs::create_dir(&sub).map_err(|e| e.to_string())?;
        if !run_twice(&sub, command, config)? {
            differing.push(format!("{command} {}", config.file_name().unwrap().to_string_lossy()));
        }
    }
    ensure(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} runs byte-identical", runs.len())
        } else {
            format!("outputs differ: {}", differing.join(", "))
        },
    )
}

fn criteria() -> Vec<Acceptance> {
    vec![
        Acceptance { id: 1, name: "gradient fidelity", budget: minutes(1), check: gradient_fidelity },
        Acceptance { id: 2, name: "decomposition identity", budget: minutes(10), check: decomposition_identity },
        Acceptance { id: 3, name: "closed-form fixtures", budget: minutes(1), check: closed_form_fixtures },
        Acceptance { id: 4, name: "index-class correctness", budget: minutes(2), check: index_classes },
        Acceptance { id: 5, name: "one-way size", budget: minutes(30), check: one_way_size },
        Acceptance { id: 6, name: "one-way power", budget: minutes(15), check: one_way_power },
        Acceptance { id: 7, name: "two-way size and power", budget: minutes(30), check: two_way_size_power },
        Acceptance { id: 8, name: "consistency trend", budget: minutes(30), check: consistency_trend },
        Acceptance { id: 9, name: "symmetric-law βθ block", budget: minutes(10), check: symmetric_law },
        Acceptance { id: 10, name: "reproducibility", budget: minutes(10), check: reproducibility },
    ]
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<String>()
        .cloned()
        .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

fn main() -> ExitCode {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in criteria().into_iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.check)).unwrap_or_else(|p| Err(panic_message(p)));
        let elapsed = start.elapsed();
        let (pass, detail) = match outcome {
            Ok(d) if elapsed <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {}s budget", c.budget.as_secs())),
            Err(d) => (false, d),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {:>2} {} [{}] {} ({:.1}s)",
            c.id,
            if pass { "PASS" } else { "FAIL" },
            c.name,
            detail,
            elapsed.as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
