//! Ground truth for checking the estimators: analytic quasi-information
//! matrices given the true higher moments, Monte Carlo score covariances and
//! exact moments of the generator families.
//!
//! The analytic routines build `V`, `P`, `B_j` and `C_j` densely from the raw
//! design matrices and share no assembly code with [`crate::likelihood`] or
//! [`crate::poquim`].

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index_classes::{classify_quadruples, classify_triples};
use crate::likelihood::Criterion;
use crate::model::{Design, FixedEffects, ModelSpec, VarianceComponents};
use crate::poquim::{poquim_ml, poquim_reml};
use crate::simulation::{draw_response, DistributionSpec, Family};

/// Variance, third moment and kurtosis `κ = E(α⁴) − 3σ⁴` of one law.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionMoments {
    pub variance: f64,
    pub third: f64,
    pub kappa: f64,
}

/// Exact moments of a generator family after centering and scaling.
pub fn distribution_moments(spec: &DistributionSpec) -> Result<DistributionMoments> {
    spec.family.validate()?;
    let (mu3, mu4) = match spec.family {
        Family::Normal => (0.0, 3.0),
        Family::DoubleExponential => (0.0, 6.0),
        Family::CenteredExponential => (2.0, 9.0),
        Family::NormalMixture { mu1, mu2, rho } => {
            let (_, var) = spec.family.raw_mean_variance();
            if !(var > 0.0) {
                return Err(Error::Config("degenerate mixture".into()));
            }
            let delta = mu2 - mu1;
            let a = -rho * delta;
            let b = (1.0 - rho) * delta;
            let third = (1.0 - rho) * (a.powi(3) + 3.0 * a) + rho * (b.powi(3) + 3.0 * b);
            let fourth = (1.0 - rho) * (a.powi(4) + 6.0 * a * a + 3.0)
                + rho * (b.powi(4) + 6.0 * b * b + 3.0);
            (third / var.powf(1.5), fourth / (var * var))
        }
    };
    let s2 = spec.target_variance;
    Ok(DistributionMoments {
        variance: s2,
        third: mu3 * s2.powf(1.5),
        kappa: (mu4 - 3.0) * s2 * s2,
    })
}

/// Per-term higher moments, error term first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HigherMoments {
    pub kappa: Vec<f64>,
    pub third: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl HigherMoments {
    pub fn new(kappa: Vec<f64>, third: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        if kappa.len() != sigma2.len() || third.len() != sigma2.len() {
            return Err(Error::Dimension("moment vectors differ in length".into()));
        }
        for ((k, &s), t) in kappa.iter().zip(&sigma2).zip(0..) {
            if *k < -2.0 * s * s - 1e-12 {
                return Err(Error::InvalidParameters(format!(
                    "kurtosis {k} of term {t} is below −2σ⁴"
                )));
            }
        }
        Ok(Self { kappa, third, sigma2 })
    }

    pub fn gaussian(theta: &VarianceComponents) -> Self {
        let sigma2: Vec<f64> = (0..theta.len()).map(|t| theta.sigma2(t)).collect();
        Self {
            kappa: vec![0.0; sigma2.len()],
            third: vec![0.0; sigma2.len()],
            sigma2,
        }
    }

    /// Moments of the given families scaled to the variances implied by `θ`.
    pub fn from_families(theta: &VarianceComponents, families: &[Family]) -> Result<Self> {
        if families.len() != theta.len() {
            return Err(Error::Dimension(format!(
                "{} families for {} variance components",
                families.len(),
                theta.len()
            )));
        }
        let moments = families
            .iter()
            .enumerate()
            .map(|(t, &family)| distribution_moments(&DistributionSpec::new(family, theta.sigma2(t))?))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            moments.iter().map(|m| m.kappa).collect(),
            moments.iter().map(|m| m.third).collect(),
            moments.iter().map(|m| m.variance).collect(),
        )
    }
}

struct DenseParts {
    v: DMatrix<f64>,
    vinv: DMatrix<f64>,
    /// `B_j` (REML) or `C_j` (ML).
    forms: Vec<DMatrix<f64>>,
    /// `E(u'F_j u) = tr(F_j V)`.
    expectation: Vec<f64>,
    /// Columns `z_tl` of every term, error term first as unit vectors.
    columns: Vec<Vec<DVector<f64>>>,
}

fn dense_parts(theta: &VarianceComponents, design: &Design, criterion: Criterion) -> Result<DenseParts> {
    if theta.gamma.len() != design.n_terms() {
        return Err(Error::Dimension("θ does not match the number of random terms".into()));
    }
    let n = design.n_obs();
    let lambda = theta.lambda;
    let mut v = DMatrix::identity(n, n);
    for (term, g) in design.terms().iter().zip(&theta.gamma) {
        v += &term.matrix * term.matrix.transpose() * *g;
    }
    v *= lambda;
    let vinv = v
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("V".into()))?
        .inverse();
    let x = design.x();
    let weight = match criterion {
        Criterion::Reml => {
            let vx = &vinv * x;
            let h = (x.transpose() * &vx)
                .cholesky()
                .ok_or_else(|| Error::Singular("X'V⁻¹X".into()))?
                .inverse();
            &vinv - &vx * h * vx.transpose()
        }
        Criterion::Ml => vinv.clone(),
    };
    let mut forms = vec![&weight / (2.0 * lambda)];
    for term in design.terms() {
        let wz = &weight * &term.matrix;
        forms.push(&wz * wz.transpose() * (lambda / 2.0));
    }
    let expectation = forms.iter().map(|f| (f * &v).trace()).collect();
    let mut columns = vec![(0..n).map(|i| DVector::from_fn(n, |r, _| f64::from(u8::from(r == i)))).collect()];
    for term in design.terms() {
        columns.push((0..term.matrix.ncols()).map(|l| term.matrix.column(l).into_owned()).collect());
    }
    Ok(DenseParts {
        v,
        vinv,
        forms,
        expectation,
        columns,
    })
}

fn quasi_information_block(parts: &DenseParts, moments: &HigherMoments) -> DMatrix<f64> {
    let q = parts.forms.len();
    let fv: Vec<DMatrix<f64>> = parts.forms.iter().map(|f| f * &parts.v).collect();
    let loads: Vec<Vec<DVector<f64>>> = parts
        .columns
        .iter()
        .map(|cols| {
            cols.iter()
                .map(|z| DVector::from_iterator(q, parts.forms.iter().map(|f| f.quadform(z))))
                .collect()
        })
        .collect();
    DMatrix::from_fn(q, q, |j, k| {
        let gaussian = 2.0 * (&fv[j] * &fv[k]).trace();
        let excess: f64 = moments
            .kappa
            .iter()
            .zip(&loads)
            .map(|(kappa, cols)| kappa * cols.iter().map(|w| w[j] * w[k]).sum::<f64>())
            .sum();
        gaussian + excess
    })
}

trait QuadForm {
    fn quadform(&self, z: &DVector<f64>) -> f64;
}

impl QuadForm for DMatrix<f64> {
    fn quadform(&self, z: &DVector<f64>) -> f64 {
        z.dot(&(self * z))
    }
}

fn check_moments(moments: &HigherMoments, design: &Design) -> Result<()> {
    if moments.kappa.len() != design.n_terms() + 1 {
        return Err(Error::Dimension(format!(
            "moments for {} terms, model has {}",
            moments.kappa.len(),
            design.n_terms() + 1
        )));
    }
    Ok(())
}

/// `Var(∂l_R/∂θ)` under the generating laws: `2 tr(B_jVB_kV) + Σ_t κ_t Σ_l (z'B_jz)(z'B_kz)`.
pub fn analytic_quim_reml(
    theta: &VarianceComponents,
    moments: &HigherMoments,
    design: &Design,
) -> Result<DMatrix<f64>> {
    check_moments(moments, design)?;
    let parts = dense_parts(theta, design, Criterion::Reml)?;
    Ok(quasi_information_block(&parts, moments))
}

/// `Var(∂l/∂ψ)` for `ψ = (β', θ')'`, including the third-moment `βθ` blocks.
pub fn analytic_quim_ml(
    theta: &VarianceComponents,
    moments: &HigherMoments,
    design: &Design,
) -> Result<DMatrix<f64>> {
    check_moments(moments, design)?;
    let parts = dense_parts(theta, design, Criterion::Ml)?;
    let p = design.n_fixed();
    let q = parts.forms.len();
    let q_vecs = &parts.vinv * design.x();
    let mut out = DMatrix::zeros(p + q, p + q);
    out.view_mut((0, 0), (p, p))
        .copy_from(&(design.x().transpose() * &q_vecs));
    for j in 0..p {
        let qj = q_vecs.column(j);
        for k in 0..q {
            let v: f64 = moments
                .third
                .iter()
                .zip(&parts.columns)
                .map(|(third, cols)| {
                    third * cols.iter().map(|z| qj.dot(z) * parts.forms[k].quadform(z)).sum::<f64>()
                })
                .sum();
            out[(j, p + k)] = v;
            out[(p + k, j)] = v;
        }
    }
    out.view_mut((p, p), (q, q)).copy_from(&quasi_information_block(&parts, moments));
    Ok(out)
}

/// Sample mean and covariance of a vector statistic with per-entry
/// standard errors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub replicates: usize,
    pub mean: DVector<f64>,
    pub mean_se: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub covariance_se: DMatrix<f64>,
}

fn summarize(samples: &[DVector<f64>]) -> MonteCarloEstimate {
    let r = samples.len() as f64;
    let dim = samples[0].len();
    let mean = samples.iter().fold(DVector::zeros(dim), |acc, s| acc + s) / r;
    let centered: Vec<DVector<f64>> = samples.iter().map(|s| s - &mean).collect();
    let mut covariance = DMatrix::zeros(dim, dim);
    let mut covariance_se = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        for k in 0..dim {
            let w: Vec<f64> = centered.iter().map(|c| c[j] * c[k]).collect();
            let m = w.iter().sum::<f64>() / r;
            let var = w.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (r - 1.0);
            covariance[(j, k)] = m * r / (r - 1.0);
            covariance_se[(j, k)] = (var / r).sqrt();
        }
    }
    let mean_se = DVector::from_fn(dim, |j, _| (covariance[(j, j)] / r).sqrt());
    MonteCarloEstimate {
        replicates: samples.len(),
        mean,
        mean_se,
        covariance,
        covariance_se,
    }
}

/// Monte Carlo covariance of the REML score (`θ`) or ML score (`β, θ`) at
/// the data-generating `(β, θ)`.
pub fn mc_score_variance(
    theta: &VarianceComponents,
    beta: &FixedEffects,
    design: &Design,
    families: &[Family],
    criterion: Criterion,
    reps: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    if reps < 2 {
        return Err(Error::Config("need at least two replicates".into()));
    }
    check_families(theta, families)?;
    let parts = dense_parts(theta, design, criterion)?;
    let q_vecs = &parts.vinv * design.x();
    let xb = design.x() * &beta.beta;
    let samples: Vec<DVector<f64>> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let y = draw_response(design, &beta.beta, theta, families, seed, r);
            let u = &y - &xb;
            let quad = parts
                .forms
                .iter()
                .zip(&parts.expectation)
                .map(|(f, e)| f.quadform(&u) - e);
            match criterion {
                Criterion::Reml => DVector::from_iterator(parts.forms.len(), quad),
                Criterion::Ml => {
                    let beta_score = q_vecs.transpose() * &u;
                    DVector::from_iterator(
                        beta_score.len() + parts.forms.len(),
                        beta_score.iter().copied().chain(quad),
                    )
                }
            }
        })
        .collect();
    Ok(summarize(&samples))
}

fn check_families(theta: &VarianceComponents, families: &[Family]) -> Result<()> {
    if families.len() != theta.len() {
        return Err(Error::Dimension(format!(
            "{} families for {} variance components",
            families.len(),
            theta.len()
        )));
    }
    Ok(())
}

/// Monte Carlo mean of the POQUIM total at pinned `(β, θ)` next to the
/// analytic quasi-information.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoquimCheck {
    pub criterion: Criterion,
    pub replicates: usize,
    pub analytic: DMatrix<f64>,
    /// Mean of observed plus estimated part.
    pub mean: DMatrix<f64>,
    /// Standard error of the mean (the estimated part is constant).
    pub se: DMatrix<f64>,
    /// `(mean − analytic)/se`, or 0 where both the SE and the gap vanish.
    pub z: DMatrix<f64>,
}

impl PoquimCheck {
    pub fn max_abs_z(&self) -> f64 {
        self.z.iter().fold(0.0f64, |m, z| m.max(z.abs()))
    }
}

/// Compares the Monte Carlo mean of POQUIM evaluated at the truth against
/// the analytic quasi-information of the generating laws.
pub fn mc_poquim_check(
    theta: &VarianceComponents,
    beta: &FixedEffects,
    design: &std::sync::Arc<Design>,
    families: &[Family],
    criterion: Criterion,
    reps: usize,
    seed: u64,
) -> Result<PoquimCheck> {
    if reps < 2 {
        return Err(Error::Config("need at least two replicates".into()));
    }
    check_families(theta, families)?;
    let moments = HigherMoments::from_families(theta, families)?;
    let quads = classify_quadruples(design)?;
    let analytic = match criterion {
        Criterion::Reml => analytic_quim_reml(theta, &moments, design)?,
        Criterion::Ml => analytic_quim_ml(theta, &moments, design)?,
    };
    let triples = match criterion {
        Criterion::Ml => Some(classify_triples(design)?),
        Criterion::Reml => None,
    };
    let totals = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let y = draw_response(design, &beta.beta, theta, families, seed, r);
            let model = ModelSpec::new(y, std::sync::Arc::clone(design))?;
            let d = match &triples {
                None => poquim_reml(theta, beta, &model, &quads)?,
                Some(t) => poquim_ml(theta, beta, &model, &quads, t)?,
            };
            Ok(DVector::from_column_slice(d.total.as_slice()))
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&totals);
    let dim = analytic.nrows();
    let mean = DMatrix::from_column_slice(dim, dim, summary.mean.as_slice());
    let se = DMatrix::from_column_slice(dim, dim, summary.mean_se.as_slice());
    let z = DMatrix::from_fn(dim, dim, |j, k| {
        let gap = mean[(j, k)] - analytic[(j, k)];
        let scale = 1e-9 * (1.0 + analytic[(j, k)].abs());
        if se[(j, k)] > scale {
            gap / se[(j, k)]
        } else if gap.abs() <= scale {
            0.0
        } else {
            gap.signum() * f64::INFINITY
        }
    });
    Ok(PoquimCheck {
        criterion,
        replicates: reps,
        analytic,
        mean,
        se,
        z,
    })
}
