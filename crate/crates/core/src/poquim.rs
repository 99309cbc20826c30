//! Partially observed quasi-information matrices and sandwich ACMs.
//!
//! With `R_l = Σ_{S_l} u_{i₁}⋯u_{i₄}` and `G_l = Σ_{S_l} Γ(i₁,i₃)Γ(i₂,i₄)`,
//! both independent of `(j, k)`, the two parts are
//!
//! ```text
//! observed_jk  = Σ_l c_{j,k,l} R_l
//! estimated_jk = 2 tr(B_j V B_k V) − 3λ² Σ_l c_{j,k,l} G_l
//! ```
//!
//! For ML the βθ block replaces the quadruple sums by triple sums and has no
//! estimated part, and the ββ block is `X'V⁻¹X` with no observed part.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index_classes::{accumulate_quadruples, accumulate_triples, IndexClassPartition, QuadraticForms};
use crate::likelihood::{gaussian_information, Criterion};
use crate::model::{symmetrize, Design, FixedEffects, ModelSpec, VarianceComponents};
use crate::system::GlsSystem;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuimDecomposition {
    pub criterion: Criterion,
    /// `Î₁,₁`.
    pub observed: DMatrix<f64>,
    /// `Î₁,₂`.
    pub estimated: DMatrix<f64>,
    /// `Î₁ = Î₁,₁ + Î₁,₂`.
    pub total: DMatrix<f64>,
    /// `Î₂`, the expected Hessian at the evaluation point.
    pub i2: DMatrix<f64>,
}

impl QuimDecomposition {
    pub fn dimension(&self) -> usize {
        self.total.nrows()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AcmEstimate {
    pub sigma: DMatrix<f64>,
    pub source: Criterion,
}

/// `B_j` (REML) or `C_j` (ML) blocks evaluated through a [`GlsSystem`].
pub struct ScoreForms<'s, 'a> {
    system: &'s GlsSystem<'a>,
    criterion: Criterion,
    /// `P Z_t` or `V⁻¹ Z_t`.
    term_products: Vec<DMatrix<f64>>,
}

impl<'s, 'a> ScoreForms<'s, 'a> {
    pub fn new(system: &'s GlsSystem<'a>, criterion: Criterion) -> Self {
        let s = system.design().n_terms();
        let term_products = (0..s)
            .map(|t| match criterion {
                Criterion::Reml => system.project_term(t),
                Criterion::Ml => system.covariance().solve_term(t),
            })
            .collect();
        Self {
            system,
            criterion,
            term_products,
        }
    }
}

impl QuadraticForms for ScoreForms<'_, '_> {
    fn n_forms(&self) -> usize {
        self.term_products.len() + 1
    }

    fn block(&self, j: usize, rows: &[usize]) -> DMatrix<f64> {
        let k = rows.len();
        let lambda = self.system.lambda();
        if j == 0 {
            let cov = self.system.covariance();
            let mut b = DMatrix::zeros(k, k);
            for a in 0..k {
                for c in a..k {
                    let v = cov.inverse_entry(rows[a], rows[c]);
                    b[(a, c)] = v;
                    b[(c, a)] = v;
                }
            }
            if self.criterion == Criterion::Reml {
                let w = self.system.vinv_x().select_rows(rows);
                b -= &w * self.system.h_inv() * w.transpose();
                symmetrize(&mut b);
            }
            b / (2.0 * lambda)
        } else {
            let w = self.term_products[j - 1].select_rows(rows);
            let mut b = &w * w.transpose() * (lambda / 2.0);
            symmetrize(&mut b);
            b
        }
    }
}

fn check_beta(beta: &FixedEffects, design: &Design) -> Result<()> {
    if beta.beta.len() != design.n_fixed() {
        return Err(Error::Dimension(format!(
            "beta has length {}, X has {} columns",
            beta.beta.len(),
            design.n_fixed()
        )));
    }
    Ok(())
}

fn check_partition(partition: &IndexClassPartition, order: usize) -> Result<()> {
    if partition.order() != order {
        return Err(Error::InvalidModel(format!(
            "expected a partition of {order}-tuples, got {}-tuples",
            partition.order()
        )));
    }
    Ok(())
}

/// θθ parts shared by REML (`B`) and ML (`C`).
fn theta_parts(
    partition: &IndexClassPartition,
    forms: &ScoreForms<'_, '_>,
    design: &Design,
    theta: &VarianceComponents,
    u: &DVector<f64>,
    gaussian: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let sums = accumulate_quadruples(partition, forms, design, Some(u), Some(&theta.gamma));
    let dim = forms.n_forms();
    let lambda2 = theta.lambda * theta.lambda;
    let mut observed = DMatrix::zeros(dim, dim);
    let mut estimated = gaussian.clone();
    for (q, &(j, k)) in sums.pairs.iter().enumerate() {
        let (mut obs, mut ker) = (0.0, 0.0);
        for (l, class) in partition.classes().iter().enumerate() {
            let c = sums.products[l][q] / class.cardinality as f64;
            obs += c * sums.residual[l];
            ker += c * sums.kernel[l];
        }
        observed[(j, k)] = obs;
        observed[(k, j)] = obs;
        estimated[(j, k)] -= 3.0 * lambda2 * ker;
        if j != k {
            estimated[(k, j)] = estimated[(j, k)];
        }
    }
    (observed, estimated)
}

/// POQUIM for the REML estimator of `θ` evaluated at `(θ, β)`.
pub fn poquim_reml(
    theta: &VarianceComponents,
    beta: &FixedEffects,
    model: &ModelSpec,
    quadruples: &IndexClassPartition,
) -> Result<QuimDecomposition> {
    let design = &*model.design;
    check_beta(beta, design)?;
    check_partition(quadruples, 4)?;
    let system = GlsSystem::new(design, theta)?;
    let u = &model.y - design.x() * &beta.beta;
    let gaussian = gaussian_information(
        design,
        theta.lambda,
        &system.zt_project_z(),
        (design.n_obs() - design.n_fixed()) as f64,
    );
    let forms = ScoreForms::new(&system, Criterion::Reml);
    let (observed, estimated) = theta_parts(quadruples, &forms, design, theta, &u, &gaussian);
    let total = &observed + &estimated;
    Ok(QuimDecomposition {
        criterion: Criterion::Reml,
        observed,
        estimated,
        total,
        i2: -gaussian,
    })
}

/// POQUIM for the ML estimator of `ψ = (β', θ')'` evaluated at `(θ, β)`.
pub fn poquim_ml(
    theta: &VarianceComponents,
    beta: &FixedEffects,
    model: &ModelSpec,
    quadruples: &IndexClassPartition,
    triples: &IndexClassPartition,
) -> Result<QuimDecomposition> {
    let design = &*model.design;
    check_beta(beta, design)?;
    check_partition(quadruples, 4)?;
    check_partition(triples, 3)?;
    let system = GlsSystem::new(design, theta)?;
    let u = &model.y - design.x() * &beta.beta;
    let p = design.n_fixed();
    let nf = design.n_terms() + 1;
    let dim = p + nf;

    let gaussian = gaussian_information(
        design,
        theta.lambda,
        &system.covariance().zt_solve_z(),
        design.n_obs() as f64,
    );
    let forms = ScoreForms::new(&system, Criterion::Ml);
    let (obs_tt, est_tt) = theta_parts(quadruples, &forms, design, theta, &u, &gaussian);
    let info_beta = system.information_beta();

    let sums = accumulate_triples(triples, system.vinv_x(), &forms, Some(&u));
    let mut obs_bt = DMatrix::zeros(p, nf);
    for j in 0..p {
        for k in 0..nf {
            obs_bt[(j, k)] = triples
                .classes()
                .iter()
                .enumerate()
                .map(|(l, class)| sums.products[l][j * nf + k] / class.cardinality as f64 * sums.residual[l])
                .sum();
        }
    }

    let mut observed = DMatrix::zeros(dim, dim);
    let mut estimated = DMatrix::zeros(dim, dim);
    let mut i2 = DMatrix::zeros(dim, dim);
    estimated.view_mut((0, 0), (p, p)).copy_from(&info_beta);
    observed.view_mut((0, p), (p, nf)).copy_from(&obs_bt);
    observed.view_mut((p, 0), (nf, p)).copy_from(&obs_bt.transpose());
    observed.view_mut((p, p), (nf, nf)).copy_from(&obs_tt);
    estimated.view_mut((p, p), (nf, nf)).copy_from(&est_tt);
    i2.view_mut((0, 0), (p, p)).copy_from(&(-info_beta));
    i2.view_mut((p, p), (nf, nf)).copy_from(&(-gaussian));
    let total = &observed + &estimated;
    Ok(QuimDecomposition {
        criterion: Criterion::Ml,
        observed,
        estimated,
        total,
        i2,
    })
}

/// Relative eigenvalue tolerance below which `Σ̂` counts as indefinite.
const PSD_TOLERANCE: f64 = 1e-10;

/// `Σ̂ = Î₂⁻¹ Î₁ Î₂⁻¹`, symmetrized.
pub fn acm(decomp: &QuimDecomposition) -> Result<AcmEstimate> {
    let dim = decomp.dimension();
    let i2_inv = decomp
        .i2
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular("expected Hessian".into()))?;
    if i2_inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("expected Hessian".into()));
    }
    let mut sigma = &i2_inv * &decomp.total * &i2_inv;
    symmetrize(&mut sigma);
    if dim > 0 {
        let eig = SymmetricEigen::new(sigma.clone()).eigenvalues;
        let max = eig.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -PSD_TOLERANCE * max.max(f64::MIN_POSITIVE) {
            return Err(Error::Indefinite { min_eigenvalue: min });
        }
    }
    Ok(AcmEstimate {
        sigma,
        source: decomp.criterion,
    })
}
