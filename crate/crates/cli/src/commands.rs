use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use poquim_core::{
    acm, classify_quadruples, classify_triples, fit_ml, fit_reml, jackknife_oneway_test, mc_poquim_check, poquim_ml,
    poquim_reml, poquim_test, Criterion, Error as CoreError, FitResult, FixedEffects, IndexClassPartition, Study,
    StudyConfig, StudyResult, TestMethod, TestOptions, TestResult,
};
use serde::Serialize;

use crate::config::{Loaded, RunConfig};
use crate::data::{self, Dataset, Table};
use crate::error::Result;

/// What a subcommand hands back for writing.
pub struct Output {
    pub json: String,
    pub tsv: String,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn render<T: Serialize>(report: &T) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("reports serialize");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct ModelSummary {
    n_obs: usize,
    fixed: Vec<String>,
    random: Vec<TermSummary>,
}

#[derive(Serialize)]
struct TermSummary {
    name: String,
    levels: usize,
}

#[derive(Serialize)]
struct ClassSummary {
    count: usize,
    cardinalities: Vec<u64>,
}

impl From<&IndexClassPartition> for ClassSummary {
    fn from(p: &IndexClassPartition) -> Self {
        Self {
            count: p.len(),
            cardinalities: p.cardinalities(),
        }
    }
}

#[derive(Serialize)]
struct IndexClasses {
    quadruples: ClassSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    triples: Option<ClassSummary>,
}

#[derive(Serialize)]
struct Information {
    observed: Vec<Vec<f64>>,
    estimated: Vec<Vec<f64>>,
    total: Vec<Vec<f64>>,
    expected_hessian: Vec<Vec<f64>>,
}

impl From<&poquim_core::QuimDecomposition> for Information {
    fn from(d: &poquim_core::QuimDecomposition) -> Self {
        Self {
            observed: rows(&d.observed),
            estimated: rows(&d.estimated),
            total: rows(&d.total),
            expected_hessian: rows(&d.i2),
        }
    }
}

#[derive(Serialize)]
struct Covariance {
    matrix: Vec<Vec<f64>>,
    standard_errors: Vec<f64>,
}

impl Covariance {
    fn new(sigma: &DMatrix<f64>) -> Self {
        Self {
            matrix: rows(sigma),
            standard_errors: sigma.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect(),
        }
    }
}

#[derive(Serialize)]
struct FitReport<'a> {
    command: &'static str,
    seed: u64,
    config: &'a RunConfig,
    model: ModelSummary,
    fit: FitResult,
    index_classes: IndexClasses,
    information: Information,
    #[serde(skip_serializing_if = "Option::is_none")]
    acm: Option<Covariance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    acm_error: Option<String>,
}

fn load_data(loaded: &Loaded) -> Result<Dataset> {
    let config = &loaded.config;
    if config.simulate.is_some() || config.oracle.is_some() {
        return Err(loaded.error("a data run cannot also carry 'simulate' or 'oracle' blocks"));
    }
    let spec = config.data.as_ref().ok_or_else(|| loaded.error("missing 'data' block"))?;
    let table = Table::read(&loaded.resolve(&spec.path))?;
    data::build(&table, &spec.response, &config.fixed, &config.random)
}

fn model_summary(dataset: &Dataset) -> ModelSummary {
    let design = &dataset.model.design;
    ModelSummary {
        n_obs: design.n_obs(),
        fixed: design.fixed_labels().to_vec(),
        random: design
            .terms()
            .iter()
            .zip(&dataset.levels)
            .map(|(t, l)| TermSummary {
                name: t.name.clone(),
                levels: l.len(),
            })
            .collect(),
    }
}

pub fn fit(loaded: &Loaded, seed: u64) -> Result<Output> {
    let dataset = load_data(loaded)?;
    let config = &loaded.config;
    let model = &dataset.model;
    let quadruples = classify_quadruples(&model.design)?;
    let (fit, decomposition, triples) = match Criterion::from(config.method) {
        Criterion::Reml => {
            let fit = fit_reml(model, &config.fit)?;
            let d = poquim_reml(&fit.theta_hat, &fit.beta_hat, model, &quadruples)?;
            (fit, d, None)
        }
        Criterion::Ml => {
            let fit = fit_ml(model, &config.fit)?;
            let triples = classify_triples(&model.design)?;
            let d = poquim_ml(&fit.theta_hat, &fit.beta_hat, model, &quadruples, &triples)?;
            (fit, d, Some(triples))
        }
    };
    let (acm, acm_error) = match acm(&decomposition) {
        Ok(a) => (Some(Covariance::new(&a.sigma)), None),
        Err(e @ (CoreError::Indefinite { .. } | CoreError::Singular(_) | CoreError::NotPositiveDefinite(_))) => {
            (None, Some(e.to_string()))
        }
        Err(e) => return Err(e.into()),
    };
    let report = FitReport {
        command: "fit",
        seed,
        config,
        model: model_summary(&dataset),
        fit,
        index_classes: IndexClasses {
            quadruples: (&quadruples).into(),
            triples: triples.as_ref().map(Into::into),
        },
        information: (&decomposition).into(),
        acm,
        acm_error,
    };
    let mut tsv = Vec::new();
    quadruples.write_tsv(&mut tsv).expect("writing to memory");
    Ok(Output {
        json: render(&report),
        tsv: String::from_utf8(tsv).expect("ascii table"),
    })
}

#[derive(Serialize)]
struct TestReport<'a> {
    command: &'static str,
    seed: u64,
    config: &'a RunConfig,
    model: ModelSummary,
    result: TestResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    fit: Option<FitResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    null_fit: Option<FitResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    index_classes: Option<ClassSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    information: Option<Information>,
    #[serde(skip_serializing_if = "Option::is_none")]
    acm: Option<Covariance>,
}

fn result_tsv(r: &TestResult) -> String {
    let mut s = String::from("method\tstatistic\tdf\tp_value");
    for d in &r.reject_at {
        write!(s, "\treject_{}", d.level).unwrap();
    }
    let method = serde_json::to_value(r.method).expect("method serializes");
    write!(s, "\n{}\t{}\t{}\t{}", method.as_str().unwrap_or_default(), r.statistic, r.df, r.p_value).unwrap();
    for d in &r.reject_at {
        write!(s, "\t{}", d.reject).unwrap();
    }
    s.push('\n');
    s
}

pub fn test(loaded: &Loaded, seed: u64) -> Result<Output> {
    let config = &loaded.config;
    let hypothesis = config
        .hypothesis
        .as_ref()
        .ok_or_else(|| loaded.error("missing 'hypothesis' block"))?
        .build()?;
    let options = config.test.clone().unwrap_or_default();
    let dataset = load_data(loaded)?;
    let model = &dataset.model;
    if hypothesis.k.nrows() != model.n_terms() + 1 {
        return Err(loaded.error(format!(
            "hypothesis rows have length {}, the model has {} variance components",
            hypothesis.k.nrows(),
            model.n_terms() + 1
        )));
    }
    let report = match options.method {
        TestMethod::PoquimChi2 => {
            if config.method != crate::config::Method::Reml {
                return Err(loaded.error("the POQUIM dispersion test is built on the REML fit"));
            }
            let quadruples = classify_quadruples(&model.design)?;
            let fit = fit_reml(model, &config.fit)?;
            let null_substitution = config.hypothesis.as_ref().is_some_and(|h| h.null_substitution);
            let t = poquim_test(
                model,
                &fit,
                &hypothesis,
                &quadruples,
                &TestOptions {
                    null_substitution,
                    levels: options.levels.clone(),
                },
                &config.fit,
            )?;
            TestReport {
                command: "test",
                seed,
                config,
                model: model_summary(&dataset),
                result: t.result,
                fit: Some(fit),
                null_fit: t.null_fit,
                index_classes: Some((&quadruples).into()),
                information: Some((&t.decomposition).into()),
                acm: Some(Covariance::new(&t.acm.sigma)),
            }
        }
        TestMethod::JackknifeT => {
            let layout = dataset.one_way_layout().ok_or_else(|| {
                CoreError::UnsupportedDesign(
                    "the delete-group jackknife needs a balanced one-way design with an intercept".into(),
                )
            })?;
            let gamma0 = match hypothesis.pinned_coordinates().get(1) {
                Some(Some(g)) if hypothesis.rank() == 1 => *g,
                _ => return Err(loaded.error("the jackknife tests a single hypothesis on γ₁")),
            };
            TestReport {
                command: "test",
                seed,
                config,
                model: model_summary(&dataset),
                result: jackknife_oneway_test(&layout, gamma0, &options.levels)?,
                fit: None,
                null_fit: None,
                index_classes: None,
                information: None,
                acm: None,
            }
        }
    };
    let tsv = result_tsv(&report.result);
    Ok(Output {
        json: render(&report),
        tsv,
    })
}

#[derive(Serialize)]
struct Cell {
    scenario: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    alternative: Option<f64>,
    study: StudyConfig,
    result: StudyResult,
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    command: &'static str,
    seed: u64,
    config: &'a RunConfig,
    cells: Vec<Cell>,
}

pub fn simulate(loaded: &Loaded, seed: u64) -> Result<Output> {
    let config = &loaded.config;
    if config.data.is_some() || config.oracle.is_some() {
        return Err(loaded.error("a simulate run cannot also carry 'data' or 'oracle' blocks"));
    }
    let sim = config.simulate.as_ref().ok_or_else(|| loaded.error("missing 'simulate' block"))?;
    let hypothesis = config.hypothesis.clone().ok_or_else(|| loaded.error("missing 'hypothesis' block"))?;
    if sim.scenarios.is_empty() {
        return Err(loaded.error("no scenarios"));
    }
    let alternatives: Vec<Option<f64>> = match &sim.alternatives {
        Some(grid) if grid.coordinate == 0 => return Err(loaded.error("alternatives vary a ratio γ_t, coordinate ≥ 1")),
        Some(grid) => grid.values.iter().copied().map(Some).collect(),
        None => vec![None],
    };
    let mut cells = Vec::new();
    for (a, alternative) in alternatives.iter().enumerate() {
        for (j, scenario) in sim.scenarios.iter().enumerate() {
            let mut truth = scenario.truth.clone();
            if let (Some(v), Some(grid)) = (alternative, &sim.alternatives) {
                let slot = truth
                    .gamma
                    .get_mut(grid.coordinate - 1)
                    .ok_or_else(|| loaded.error(format!("scenario '{}' has no γ_{}", scenario.label, grid.coordinate)))?;
                *slot = *v;
            }
            let study = StudyConfig {
                name: scenario.label.clone(),
                design: scenario.design.clone(),
                truth,
                distributions: scenario.distributions.clone(),
                hypothesis: hypothesis.clone(),
                methods: sim.methods.clone(),
                nominal_levels: sim.nominal_levels.clone(),
                replicates: sim.replicates,
                master_seed: seed.wrapping_add((a * sim.scenarios.len() + j) as u64),
                fit: config.fit.clone(),
            };
            let result = Study::new(study.clone())?.run();
            cells.push(Cell {
                scenario: scenario.label.clone(),
                alternative: *alternative,
                study,
                result,
            });
        }
    }
    let tsv = simulate_tsv(&cells, sim.scenarios.len(), &sim.methods, &sim.nominal_levels);
    Ok(Output {
        json: render(&SimulateReport {
            command: "simulate",
            seed,
            config,
            cells,
        }),
        tsv,
    })
}

fn method_label(m: TestMethod) -> &'static str {
    match m {
        TestMethod::PoquimChi2 => "POQUIM",
        TestMethod::JackknifeT => "Jackknife",
    }
}

/// Rows: (alternative,) nominal level × method; columns: scenarios; cells:
/// rejection fraction ± binomial SE.
fn simulate_tsv(cells: &[Cell], n_scenarios: usize, methods: &[TestMethod], levels: &[f64]) -> String {
    let with_alternatives = cells[0].alternative.is_some();
    let mut s = String::new();
    if with_alternatives {
        s.push_str("alternative\t");
    }
    s.push_str("nominal_level\tmethod");
    for c in &cells[..n_scenarios] {
        write!(s, "\t{}", c.scenario).unwrap();
    }
    s.push('\n');
    for block in cells.chunks(n_scenarios) {
        for (l, level) in levels.iter().enumerate() {
            for (k, &method) in methods.iter().enumerate() {
                if let Some(v) = block[0].alternative {
                    write!(s, "{v}\t").unwrap();
                }
                write!(s, "{level}\t{}", method_label(method)).unwrap();
                for c in block {
                    let r = &c.result.methods[k].levels[l];
                    if r.rate.is_nan() {
                        s.push_str("\tNA");
                    } else {
                        write!(s, "\t{:.4} ± {:.4}", r.rate, r.se).unwrap();
                    }
                }
                s.push('\n');
            }
        }
    }
    s
}

#[derive(Serialize)]
struct OracleReport<'a> {
    command: &'static str,
    seed: u64,
    config: &'a RunConfig,
    criterion: Criterion,
    replicates: usize,
    analytic: Vec<Vec<f64>>,
    mean: Vec<Vec<f64>>,
    se: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    max_abs_z: f64,
    within_three_se: bool,
}

pub fn oracle_check(loaded: &Loaded, seed: u64) -> Result<Output> {
    let config = &loaded.config;
    if config.data.is_some() || config.simulate.is_some() {
        return Err(loaded.error("an oracle run cannot also carry 'data' or 'simulate' blocks"));
    }
    let oracle = config.oracle.as_ref().ok_or_else(|| loaded.error("missing 'oracle' block"))?;
    let design = std::sync::Arc::new(oracle.design.build()?);
    let theta = oracle.truth.theta()?;
    if oracle.distributions.len() != design.n_terms() + 1 {
        return Err(loaded.error(format!(
            "{} distributions given, expected {} (error first)",
            oracle.distributions.len(),
            design.n_terms() + 1
        )));
    }
    for f in &oracle.distributions {
        f.validate()?;
    }
    let beta = FixedEffects::new(DVector::from_column_slice(&oracle.truth.beta))?;
    let check = mc_poquim_check(
        &theta,
        &beta,
        &design,
        &oracle.distributions,
        oracle.criterion,
        oracle.replicates,
        seed,
    )?;
    let max_abs_z = check.max_abs_z();
    let mut tsv = String::from("row\tcol\tanalytic\tmean\tse\tz\n");
    for j in 0..check.analytic.nrows() {
        for k in 0..check.analytic.ncols() {
            writeln!(
                tsv,
                "{j}\t{k}\t{}\t{}\t{}\t{}",
                check.analytic[(j, k)],
                check.mean[(j, k)],
                check.se[(j, k)],
                check.z[(j, k)]
            )
            .unwrap();
        }
    }
    let report = OracleReport {
        command: "oracle-check",
        seed,
        config,
        criterion: check.criterion,
        replicates: check.replicates,
        analytic: rows(&check.analytic),
        mean: rows(&check.mean),
        se: rows(&check.se),
        z: rows(&check.z),
        max_abs_z,
        within_three_se: max_abs_z <= 3.0,
    };
    Ok(Output {
        json: render(&report),
        tsv,
    })
}
