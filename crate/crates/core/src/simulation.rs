//! Monte Carlo size and power studies for the robust dispersion tests.
//!
//! Every replicate draws from its own ChaCha8 stream, selected by the
//! replicate index under the study's master seed, so results do not depend
//! on how replicates are scheduled across threads.

use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index_classes::{classify_quadruples, IndexClassPartition};
use crate::inference::{jackknife_oneway_test, poquim_test, Hypothesis, OneWayLayout, TestMethod, TestOptions};
use crate::likelihood::{fit_reml, FitOptions};
use crate::model::{Design, ModelSpec, RandomTerm, TermKind, VarianceComponents};

/// Distribution family of a random effect or error, before scaling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Normal,
    /// Laplace.
    DoubleExponential,
    /// `X − 1` with `X ~ Exponential(1)`.
    CenteredExponential,
    /// `N(μ₁, 1)` with probability `1 − ρ`, `N(μ₂, 1)` with probability `ρ`.
    NormalMixture { mu1: f64, mu2: f64, rho: f64 },
}

impl Family {
    pub fn validate(&self) -> Result<()> {
        if let Family::NormalMixture { mu1, mu2, rho } = *self {
            if !(mu1.is_finite() && mu2.is_finite()) {
                return Err(Error::Config("mixture means must be finite".into()));
            }
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::Config(format!("mixing probability {rho} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Mean and variance of the unstandardized law.
    pub fn raw_mean_variance(&self) -> (f64, f64) {
        match *self {
            Family::Normal => (0.0, 1.0),
            Family::DoubleExponential => (0.0, 2.0),
            Family::CenteredExponential => (0.0, 1.0),
            Family::NormalMixture { mu1, mu2, rho } => (
                (1.0 - rho) * mu1 + rho * mu2,
                1.0 + rho * (1.0 - rho) * (mu1 - mu2).powi(2),
            ),
        }
    }

    /// One draw with mean 0 and variance 1.
    pub fn sample_standard<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Family::Normal => rng.sample(StandardNormal),
            Family::DoubleExponential => {
                let e: f64 = rng.sample(Exp1);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                sign * e * std::f64::consts::FRAC_1_SQRT_2
            }
            Family::CenteredExponential => {
                let e: f64 = rng.sample(Exp1);
                e - 1.0
            }
            Family::NormalMixture { mu1, mu2, rho } => {
                let (mean, var) = self.raw_mean_variance();
                let mu = if rng.random_bool(rho) { mu2 } else { mu1 };
                let z: f64 = rng.sample(StandardNormal);
                (mu + z - mean) / var.sqrt()
            }
        }
    }
}

/// A family scaled to a target variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    #[serde(flatten)]
    pub family: Family,
    pub target_variance: f64,
}

impl DistributionSpec {
    pub fn new(family: Family, target_variance: f64) -> Result<Self> {
        family.validate()?;
        if !(target_variance >= 0.0 && target_variance.is_finite()) {
            return Err(Error::Config(format!("invalid target variance {target_variance}")));
        }
        Ok(Self { family, target_variance })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.target_variance.sqrt() * self.family.sample_standard(rng)
    }
}

/// Random term of a custom design: factor levels, optionally multiplied by a
/// per-observation weight (slope loading).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CustomTerm {
    pub name: String,
    pub levels: Vec<usize>,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DesignSpec {
    /// `y_ij = μ + α_i + ε_ij`, `m` groups of `n`, group-major order.
    OneWay { m: usize, n: usize },
    /// `y_ij = μ + v_i + w_j + e_ij`, `m × n` cells, row-major order.
    TwoWay { m: usize, n: usize },
    /// Explicit fixed rows and random terms.
    Custom {
        x: Vec<Vec<f64>>,
        #[serde(default)]
        fixed_labels: Vec<String>,
        terms: Vec<CustomTerm>,
    },
}

impl DesignSpec {
    pub fn build(&self) -> Result<Design> {
        match self {
            DesignSpec::OneWay { m, n } => {
                if *m == 0 || *n == 0 {
                    return Err(Error::Config("one-way design needs m, n ≥ 1".into()));
                }
                let levels: Vec<usize> = (0..m * n).map(|i| i / n).collect();
                Design::new(
                    DMatrix::from_element(m * n, 1, 1.0),
                    vec![RandomTerm::from_levels("group", &levels)],
                    vec!["intercept".into()],
                )
            }
            DesignSpec::TwoWay { m, n } => {
                if *m == 0 || *n == 0 {
                    return Err(Error::Config("two-way design needs m, n ≥ 1".into()));
                }
                let rows: Vec<usize> = (0..m * n).map(|i| i / n).collect();
                let cols: Vec<usize> = (0..m * n).map(|i| i % n).collect();
                Design::new(
                    DMatrix::from_element(m * n, 1, 1.0),
                    vec![RandomTerm::from_levels("v", &rows), RandomTerm::from_levels("w", &cols)],
                    vec!["intercept".into()],
                )
            }
            DesignSpec::Custom { x, fixed_labels, terms } => {
                let n = x.len();
                let p = x.first().map_or(0, Vec::len);
                if x.iter().any(|r| r.len() != p) {
                    return Err(Error::Config("fixed-effect rows differ in length".into()));
                }
                let x = DMatrix::from_fn(n, p, |i, j| x[i][j]);
                let terms = terms
                    .iter()
                    .map(|t| custom_term(t, n))
                    .collect::<Result<Vec<_>>>()?;
                Design::new(x, terms, fixed_labels.clone())
            }
        }
    }

    pub fn is_one_way(&self) -> bool {
        matches!(self, DesignSpec::OneWay { .. })
    }
}

fn custom_term(term: &CustomTerm, n: usize) -> Result<RandomTerm> {
    if term.levels.len() != n {
        return Err(Error::Config(format!(
            "term '{}' has {} levels for {n} observations",
            term.name,
            term.levels.len()
        )));
    }
    let base = RandomTerm::from_levels(term.name.clone(), &term.levels);
    match &term.weights {
        None => Ok(base),
        Some(w) if w.len() == n => {
            let mut matrix = base.matrix;
            for (i, wi) in w.iter().enumerate() {
                matrix.row_mut(i).scale_mut(*wi);
            }
            Ok(RandomTerm::new(term.name.clone(), TermKind::Weighted, matrix))
        }
        Some(w) => Err(Error::Config(format!(
            "term '{}' has {} weights for {n} observations",
            term.name,
            w.len()
        ))),
    }
}

/// Data-generating parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub beta: Vec<f64>,
    pub lambda: f64,
    pub gamma: Vec<f64>,
}

impl Truth {
    pub fn theta(&self) -> Result<VarianceComponents> {
        VarianceComponents::new(self.lambda, self.gamma.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisConfig {
    /// Constraint rows (columns of `K`), each of length `s + 1`.
    pub k: Vec<Vec<f64>>,
    pub phi: Vec<f64>,
    #[serde(default = "default_true")]
    pub null_substitution: bool,
}

fn default_true() -> bool {
    true
}

impl HypothesisConfig {
    pub fn build(&self) -> Result<Hypothesis> {
        Hypothesis::from_rows(&self.k, &self.phi)
    }
}

/// One simulation scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    #[serde(default)]
    pub name: String,
    pub design: DesignSpec,
    pub truth: Truth,
    /// Error law first, then one per random term.
    pub distributions: Vec<Family>,
    pub hypothesis: HypothesisConfig,
    pub methods: Vec<TestMethod>,
    #[serde(default = "default_levels")]
    pub nominal_levels: Vec<f64>,
    pub replicates: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub fit: FitOptions,
}

fn default_levels() -> Vec<f64> {
    crate::inference::DEFAULT_LEVELS.to_vec()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusions {
    pub not_converged: usize,
    pub boundary: usize,
    pub failed: usize,
}

impl Exclusions {
    pub fn total(&self) -> usize {
        self.not_converged + self.boundary + self.failed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelRate {
    pub level: f64,
    pub rejections: usize,
    pub rate: f64,
    /// Binomial standard error `√(rate(1 − rate)/valid)`.
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: TestMethod,
    pub valid: usize,
    pub excluded: Exclusions,
    pub levels: Vec<LevelRate>,
}

impl MethodSummary {
    pub fn rate_at(&self, level: f64) -> Option<&LevelRate> {
        self.levels.iter().find(|r| r.level == level)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub name: String,
    pub replicates: usize,
    pub methods: Vec<MethodSummary>,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl StudyResult {
    pub fn method(&self, method: TestMethod) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }
}

/// Outcome of one method on one replicate.
#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Decided(Vec<bool>),
    NotConverged,
    Boundary,
    Failed(String),
}

/// A validated study with its design and index classes built once.
pub struct Study {
    config: StudyConfig,
    design: Arc<Design>,
    theta: VarianceComponents,
    beta: DVector<f64>,
    hypothesis: Hypothesis,
    jackknife_gamma: Option<f64>,
    partition: Option<IndexClassPartition>,
}

impl Study {
    pub fn new(config: StudyConfig) -> Result<Self> {
        if config.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if config.methods.is_empty() {
            return Err(Error::Config("no test methods requested".into()));
        }
        if let Some(&l) = config.nominal_levels.iter().find(|&&l| !(l > 0.0 && l < 1.0)) {
            return Err(Error::Config(format!("nominal level {l} outside (0, 1)")));
        }
        let design = Arc::new(config.design.build()?);
        let theta = config.truth.theta()?;
        let s = design.n_terms();
        if theta.gamma.len() != s {
            return Err(Error::Config(format!(
                "truth has {} variance ratios, design has {s} random terms",
                theta.gamma.len()
            )));
        }
        if config.truth.beta.len() != design.n_fixed() {
            return Err(Error::Config(format!(
                "truth has {} fixed effects, design has {}",
                config.truth.beta.len(),
                design.n_fixed()
            )));
        }
        if config.distributions.len() != s + 1 {
            return Err(Error::Config(format!(
                "{} distributions given, expected {} (error first)",
                config.distributions.len(),
                s + 1
            )));
        }
        for f in &config.distributions {
            f.validate()?;
        }
        let hypothesis = config.hypothesis.build()?;
        if hypothesis.k.nrows() != s + 1 {
            return Err(Error::InvalidHypothesis(format!(
                "constraint rows have length {}, expected {}",
                hypothesis.k.nrows(),
                s + 1
            )));
        }
        let jackknife_gamma = if config.methods.contains(&TestMethod::JackknifeT) {
            if !config.design.is_one_way() {
                return Err(Error::UnsupportedDesign(
                    "the delete-group jackknife needs a balanced one-way design".into(),
                ));
            }
            match hypothesis.pinned_coordinates()[1] {
                Some(g) if hypothesis.rank() == 1 => Some(g),
                _ => {
                    return Err(Error::InvalidHypothesis(
                        "the jackknife tests a single hypothesis on γ₁".into(),
                    ))
                }
            }
        } else {
            None
        };
        let partition = if config.methods.contains(&TestMethod::PoquimChi2) {
            Some(classify_quadruples(&design)?)
        } else {
            None
        };
        let beta = DVector::from_column_slice(&config.truth.beta);
        Ok(Self {
            config,
            design,
            theta,
            beta,
            hypothesis,
            jackknife_gamma,
            partition,
        })
    }

    pub fn config(&self) -> &StudyConfig {
        &self.config
    }

    pub fn design(&self) -> &Arc<Design> {
        &self.design
    }

    pub fn partition(&self) -> Option<&IndexClassPartition> {
        self.partition.as_ref()
    }

    /// Response for replicate `index`.
    pub fn dataset(&self, index: u64) -> ModelSpec {
        let y = draw_response(
            &self.design,
            &self.beta,
            &self.theta,
            &self.config.distributions,
            self.config.master_seed,
            index,
        );
        ModelSpec {
            y,
            design: Arc::clone(&self.design),
        }
    }

    /// Per-method outcomes on replicate `index`, in `methods` order.
    pub fn replicate(&self, index: u64) -> Vec<Outcome> {
        let model = self.dataset(index);
        let levels = &self.config.nominal_levels;
        self.config
            .methods
            .iter()
            .map(|method| match method {
                TestMethod::PoquimChi2 => self.poquim_outcome(&model),
                TestMethod::JackknifeT => {
                    let (m, n) = match self.config.design {
                        DesignSpec::OneWay { m, n } => (m, n),
                        _ => unreachable!("checked in Study::new"),
                    };
                    let gamma0 = self.jackknife_gamma.unwrap_or(1.0);
                    match OneWayLayout::new(m, n, model.y.as_slice().to_vec())
                        .and_then(|l| jackknife_oneway_test(&l, gamma0, levels))
                    {
                        Ok(r) => Outcome::Decided(r.reject_at.iter().map(|d| d.reject).collect()),
                        Err(e) => Outcome::Failed(e.to_string()),
                    }
                }
            })
            .collect()
    }

    fn poquim_outcome(&self, model: &ModelSpec) -> Outcome {
        let fit = match fit_reml(model, &self.config.fit) {
            Ok(f) => f,
            Err(e) => return Outcome::Failed(e.to_string()),
        };
        if !fit.converged {
            return Outcome::NotConverged;
        }
        if fit.any_boundary() {
            return Outcome::Boundary;
        }
        let options = TestOptions {
            null_substitution: self.config.hypothesis.null_substitution,
            levels: self.config.nominal_levels.clone(),
        };
        let partition = self.partition.as_ref().expect("built for POQUIM studies");
        match poquim_test(model, &fit, &self.hypothesis, partition, &options, &self.config.fit) {
            Ok(t) => Outcome::Decided(t.result.reject_at.iter().map(|d| d.reject).collect()),
            Err(e) => Outcome::Failed(e.to_string()),
        }
    }

    pub fn run(&self) -> StudyResult {
        let start = Instant::now();
        let outcomes: Vec<Vec<Outcome>> = (0..self.config.replicates as u64)
            .into_par_iter()
            .map(|r| self.replicate(r))
            .collect();
        let levels = &self.config.nominal_levels;
        let methods = self
            .config
            .methods
            .iter()
            .enumerate()
            .map(|(k, &method)| {
                let mut excluded = Exclusions::default();
                let mut counts = vec![0usize; levels.len()];
                let mut valid = 0;
                for rep in &outcomes {
                    match &rep[k] {
                        Outcome::Decided(d) => {
                            valid += 1;
                            for (c, &r) in counts.iter_mut().zip(d) {
                                *c += usize::from(r);
                            }
                        }
                        Outcome::NotConverged => excluded.not_converged += 1,
                        Outcome::Boundary => excluded.boundary += 1,
                        Outcome::Failed(_) => excluded.failed += 1,
                    }
                }
                let levels = levels
                    .iter()
                    .zip(counts)
                    .map(|(&level, rejections)| {
                        let (rate, se) = if valid > 0 {
                            let r = rejections as f64 / valid as f64;
                            (r, (r * (1.0 - r) / valid as f64).sqrt())
                        } else {
                            (f64::NAN, f64::NAN)
                        };
                        LevelRate {
                            level,
                            rejections,
                            rate,
                            se,
                        }
                    })
                    .collect();
                MethodSummary {
                    method,
                    valid,
                    excluded,
                    levels,
                }
            })
            .collect();
        StudyResult {
            name: self.config.name.clone(),
            replicates: self.config.replicates,
            methods,
            elapsed: start.elapsed(),
        }
    }
}

/// Replicate stream `index` under `seed`.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `y = Xβ + ε + Σ_t Z_t α_t` with `ε` drawn first (N values), then the
/// effects of each term in order (`m_t` values each).
pub fn draw_response(
    design: &Design,
    beta: &DVector<f64>,
    theta: &VarianceComponents,
    distributions: &[Family],
    seed: u64,
    index: u64,
) -> DVector<f64> {
    let mut rng = replicate_rng(seed, index);
    let n = design.n_obs();
    let error = DistributionSpec {
        family: distributions[0],
        target_variance: theta.lambda,
    };
    let mut y = design.x() * beta;
    for yi in y.iter_mut() {
        *yi += error.sample(&mut rng);
    }
    for (t, term) in design.terms().iter().enumerate() {
        let spec = DistributionSpec {
            family: distributions[t + 1],
            target_variance: theta.sigma2(t + 1),
        };
        let effects = DVector::from_fn(term.matrix.ncols(), |_, _| spec.sample(&mut rng));
        if theta.gamma[t] == 0.0 {
            continue;
        }
        y += &term.matrix * effects;
    }
    debug_assert_eq!(y.len(), n);
    y
}

/// Dataset for replicate `index` of `config`.
pub fn simulate_dataset(config: &StudyConfig, index: u64) -> Result<ModelSpec> {
    let design = Arc::new(config.design.build()?);
    let theta = config.truth.theta()?;
    if config.distributions.len() != design.n_terms() + 1 {
        return Err(Error::Config(format!(
            "{} distributions given, expected {}",
            config.distributions.len(),
            design.n_terms() + 1
        )));
    }
    theta.check_terms(&design)?;
    if config.truth.beta.len() != design.n_fixed() {
        return Err(Error::Config("truth.beta length does not match the fixed design".into()));
    }
    let y = draw_response(
        &design,
        &DVector::from_column_slice(&config.truth.beta),
        &theta,
        &config.distributions,
        config.master_seed,
        index,
    );
    ModelSpec::new(y, design)
}

/// Runs all replicates of one scenario and tallies rejections per method.
pub fn run_study(config: &StudyConfig) -> Result<StudyResult> {
    Ok(Study::new(config.clone())?.run())
}
