//! Robust χ² dispersion tests on the variance components and the
//! delete-group jackknife for the balanced one-way layout.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index_classes::IndexClassPartition;
use crate::likelihood::{fit_reml_constrained, FitOptions, FitResult};
use crate::model::ModelSpec;
use crate::poquim::{acm, poquim_reml, AcmEstimate};
use crate::special::{chi2_upper_tail, student_t_two_sided};

/// `H₀: K'θ = φ` with `K` of size `(s+1) × r`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Hypothesis {
    pub k: DMatrix<f64>,
    pub phi: DVector<f64>,
}

impl Hypothesis {
    pub fn new(k: DMatrix<f64>, phi: DVector<f64>) -> Result<Self> {
        if k.ncols() != phi.len() {
            return Err(Error::InvalidHypothesis(format!(
                "K has {} columns but phi has {} entries",
                k.ncols(),
                phi.len()
            )));
        }
        if k.ncols() == 0 || k.ncols() > k.nrows() {
            return Err(Error::InvalidHypothesis(format!(
                "K must have between 1 and {} columns",
                k.nrows()
            )));
        }
        let sv = k.clone().svd(false, false).singular_values;
        let max = sv.iter().copied().fold(0.0, f64::max);
        let rank = sv.iter().filter(|&&v| v > max * 1e-10).count();
        if max == 0.0 || rank < k.ncols() {
            return Err(Error::InvalidHypothesis(format!(
                "K has rank {rank}, expected {}",
                k.ncols()
            )));
        }
        Ok(Self { k, phi })
    }

    /// Builds `K` from constraint rows, each of length `s + 1`.
    pub fn from_rows(rows: &[Vec<f64>], phi: &[f64]) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidHypothesis("constraint rows differ in length".into()));
        }
        let k = DMatrix::from_fn(width, rows.len(), |i, j| rows[j][i]);
        Self::new(k, DVector::from_column_slice(phi))
    }

    /// Single constraint `θ_j = value`.
    pub fn coordinate(dim: usize, j: usize, value: f64) -> Result<Self> {
        let mut k = DMatrix::zeros(dim, 1);
        k[(j, 0)] = 1.0;
        Self::new(k, DVector::from_element(1, value))
    }

    pub fn rank(&self) -> usize {
        self.k.ncols()
    }

    /// Coordinates of `θ` fixed by the hypothesis: `θ_j` is determined when
    /// `e_j` lies in the column space of `K`, with value `a'φ` for `Ka = e_j`.
    pub fn pinned_coordinates(&self) -> Vec<Option<f64>> {
        let dim = self.k.nrows();
        let ktk = self.k.transpose() * &self.k;
        let Some(chol) = ktk.cholesky() else {
            return vec![None; dim];
        };
        (0..dim)
            .map(|j| {
                let a = chol.solve(&self.k.row(j).transpose());
                let mut resid = &self.k * &a;
                resid[j] -= 1.0;
                (resid.amax() <= 1e-10).then(|| a.dot(&self.phi))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    PoquimChi2,
    JackknifeT,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub level: f64,
    pub reject: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method: TestMethod,
    pub statistic: f64,
    pub df: f64,
    pub p_value: f64,
    pub reject_at: Vec<Decision>,
}

impl TestResult {
    fn new(method: TestMethod, statistic: f64, df: f64, p_value: f64, levels: &[f64]) -> Self {
        Self {
            method,
            statistic,
            df,
            p_value,
            reject_at: levels
                .iter()
                .map(|&level| Decision {
                    level,
                    reject: p_value < level,
                })
                .collect(),
        }
    }

    pub fn rejects_at(&self, level: f64) -> Option<bool> {
        self.reject_at.iter().find(|d| d.level == level).map(|d| d.reject)
    }
}

pub const DEFAULT_LEVELS: [f64; 3] = [0.01, 0.05, 0.10];

/// `χ̂² = (K'θ̂ − φ)'(K'Σ̂K)⁻¹(K'θ̂ − φ)` referred to `χ²_r`.
pub fn dispersion_test(fit: &FitResult, acm: &AcmEstimate, h: &Hypothesis) -> Result<TestResult> {
    dispersion_test_at(fit, acm, h, &DEFAULT_LEVELS)
}

pub fn dispersion_test_at(
    fit: &FitResult,
    acm: &AcmEstimate,
    h: &Hypothesis,
    levels: &[f64],
) -> Result<TestResult> {
    let theta = fit.theta_hat.to_vector();
    if h.k.nrows() != theta.len() || acm.sigma.nrows() != theta.len() {
        return Err(Error::InvalidHypothesis(format!(
            "K has {} rows, θ has {} entries and Σ̂ is {}×{}",
            h.k.nrows(),
            theta.len(),
            acm.sigma.nrows(),
            acm.sigma.ncols()
        )));
    }
    let d = h.k.transpose() * theta - &h.phi;
    let middle = h.k.transpose() * &acm.sigma * &h.k;
    let chol = middle
        .cholesky()
        .ok_or_else(|| Error::Singular("K'Σ̂K is not positive definite".into()))?;
    let statistic = d.dot(&chol.solve(&d)).max(0.0);
    let r = h.rank() as f64;
    Ok(TestResult::new(
        TestMethod::PoquimChi2,
        statistic,
        r,
        chi2_upper_tail(statistic, r),
        levels,
    ))
}

/// `H₀: γ₁ = γ₂` for a model with two random terms, straight POQUIM.
pub fn twoway_equal_variance_test(fit: &FitResult, acm: &AcmEstimate) -> Result<TestResult> {
    if fit.theta_hat.gamma.len() != 2 {
        return Err(Error::UnsupportedDesign(format!(
            "equal-variance test needs two random factors, model has {}",
            fit.theta_hat.gamma.len()
        )));
    }
    let h = Hypothesis::new(
        DMatrix::from_column_slice(3, 1, &[0.0, 1.0, -1.0]),
        DVector::from_element(1, 0.0),
    )?;
    dispersion_test(fit, acm, &h)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TestOptions {
    /// Evaluate POQUIM and `Î₂` with the null-specified components pinned.
    pub null_substitution: bool,
    pub levels: Vec<f64>,
}

impl Default for TestOptions {
    fn default() -> Self {
        Self {
            null_substitution: true,
            levels: DEFAULT_LEVELS.to_vec(),
        }
    }
}

/// Everything produced by one robust REML dispersion test.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoquimTest {
    pub result: TestResult,
    /// Null-constrained fit used for POQUIM when substitution applied.
    pub null_fit: Option<FitResult>,
    pub decomposition: crate::poquim::QuimDecomposition,
    pub acm: AcmEstimate,
}

/// Full robust test from an unconstrained REML fit: POQUIM at `θ̂` or at the
/// null-constrained REML estimate, sandwich ACM and χ² statistic.
pub fn poquim_test(
    model: &ModelSpec,
    fit: &FitResult,
    h: &Hypothesis,
    quadruples: &IndexClassPartition,
    options: &TestOptions,
    fit_options: &FitOptions,
) -> Result<PoquimTest> {
    if h.k.nrows() != model.n_terms() + 1 {
        return Err(Error::InvalidHypothesis(format!(
            "K has {} rows, expected {}",
            h.k.nrows(),
            model.n_terms() + 1
        )));
    }
    let pins = if options.null_substitution {
        h.pinned_coordinates()
    } else {
        vec![None; h.k.nrows()]
    };
    let null_fit = if pins.iter().any(Option::is_some) {
        Some(fit_reml_constrained(model, &pins, fit_options)?)
    } else {
        None
    };
    let (theta, beta) = match &null_fit {
        Some(f) => (&f.theta_hat, &f.beta_hat),
        None => (&fit.theta_hat, &fit.beta_hat),
    };
    let decomposition = poquim_reml(theta, beta, model, quadruples)?;
    let acm = acm(&decomposition)?;
    let result = dispersion_test_at(fit, &acm, h, &options.levels)?;
    Ok(PoquimTest {
        result,
        null_fit,
        decomposition,
        acm,
    })
}

/// Balanced one-way data, group-major: `y[i * n + j]`.
#[derive(Clone, Debug)]
pub struct OneWayLayout {
    pub m: usize,
    pub n: usize,
    pub y: Vec<f64>,
}

impl OneWayLayout {
    pub fn new(m: usize, n: usize, y: Vec<f64>) -> Result<Self> {
        if y.len() != m * n {
            return Err(Error::Dimension(format!(
                "{} observations for {m} groups of {n}",
                y.len()
            )));
        }
        Ok(Self { m, n, y })
    }

    /// `(MSA, MSE)` from scratch over the groups in `keep`.
    pub fn mean_squares(&self, keep: impl Iterator<Item = usize> + Clone) -> (f64, f64) {
        let n = self.n as f64;
        let groups: Vec<usize> = keep.collect();
        let m = groups.len() as f64;
        let means: Vec<f64> = groups
            .iter()
            .map(|&i| self.y[i * self.n..(i + 1) * self.n].iter().sum::<f64>() / n)
            .collect();
        let grand = means.iter().sum::<f64>() / m;
        let ssa = n * means.iter().map(|a| (a - grand).powi(2)).sum::<f64>();
        let sse: f64 = groups
            .iter()
            .zip(&means)
            .map(|(&i, &mu)| {
                self.y[i * self.n..(i + 1) * self.n]
                    .iter()
                    .map(|v| (v - mu).powi(2))
                    .sum::<f64>()
            })
            .sum();
        (ssa / (m - 1.0), sse / (m * (n - 1.0)))
    }
}

/// Jackknife estimates from group sums and sums of squares.
#[derive(Clone, Debug)]
pub struct JackknifeEstimates {
    pub full: f64,
    pub leave_one_out: Vec<f64>,
    pub pseudo_values: Vec<f64>,
    pub jack: f64,
}

/// `θ̂ = log(MSA/MSE)` on all groups and with each group removed.
pub fn jackknife_oneway(layout: &OneWayLayout) -> Result<JackknifeEstimates> {
    let (m, n) = (layout.m, layout.n);
    if m < 3 {
        return Err(Error::Jackknife(format!("need at least 3 groups, got {m}")));
    }
    if n < 2 {
        return Err(Error::Jackknife(format!("need group size at least 2, got {n}")));
    }
    let nf = n as f64;
    let mut sums = Vec::with_capacity(m);
    let mut squares = Vec::with_capacity(m);
    for i in 0..m {
        let g = &layout.y[i * n..(i + 1) * n];
        sums.push(g.iter().sum::<f64>());
        squares.push(g.iter().map(|v| v * v).sum::<f64>());
    }
    let total: f64 = sums.iter().sum();
    let total_sq: f64 = squares.iter().sum();
    let sum_group_sq: f64 = sums.iter().map(|s| s * s).sum::<f64>() / nf;

    let estimate = |groups: f64, t: f64, tsq: f64, gsq: f64| -> Result<f64> {
        let sse = tsq - gsq;
        let ssa = gsq - t * t / (groups * nf);
        let msa = ssa / (groups - 1.0);
        let mse = sse / (groups * (nf - 1.0));
        if !(msa > 0.0 && mse > 0.0) {
            return Err(Error::Jackknife(format!(
                "non-positive mean square (MSA = {msa}, MSE = {mse})"
            )));
        }
        Ok((msa / mse).ln())
    };

    let mf = m as f64;
    let full = estimate(mf, total, total_sq, sum_group_sq)?;
    let leave_one_out = (0..m)
        .map(|i| {
            estimate(
                mf - 1.0,
                total - sums[i],
                total_sq - squares[i],
                sum_group_sq - sums[i] * sums[i] / nf,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let pseudo_values: Vec<f64> = leave_one_out.iter().map(|t| mf * full - (mf - 1.0) * t).collect();
    let jack = pseudo_values.iter().sum::<f64>() / mf;
    Ok(JackknifeEstimates {
        full,
        leave_one_out,
        pseudo_values,
        jack,
    })
}

/// Delete-group jackknife t test of `H₀: γ₁ = γ₀` on `log(1 + γ₁n)`.
pub fn jackknife_oneway_test(layout: &OneWayLayout, gamma0: f64, levels: &[f64]) -> Result<TestResult> {
    if !(gamma0 >= 0.0 && gamma0.is_finite()) {
        return Err(Error::InvalidHypothesis(format!("gamma0 must be non-negative, got {gamma0}")));
    }
    let est = jackknife_oneway(layout)?;
    let m = layout.m as f64;
    let theta0 = (1.0 + gamma0 * layout.n as f64).ln();
    let spread = est.pseudo_values.iter().map(|p| (p - est.jack).powi(2)).sum::<f64>() / (m - 1.0);
    if !(spread > 0.0) {
        return Err(Error::Jackknife("pseudo-values have zero spread".into()));
    }
    let t = m.sqrt() * (est.jack - theta0) / spread.sqrt();
    Ok(TestResult::new(
        TestMethod::JackknifeT,
        t,
        m - 1.0,
        student_t_two_sided(t, m - 1.0),
        levels,
    ))
}
