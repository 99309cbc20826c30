//! Scores against central finite differences and expected Hessians against
//! trace products, on twenty small random models.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use poquim_core::likelihood::{ml_expected_hessian, ml_loglik, ml_score, reml_expected_hessian, reml_loglik, reml_score};
use poquim_core::model::build_covariance;
use poquim_core::{Design, FixedEffects, MlScoreParts, RemlScoreParts, VarianceComponents};
use rand::Rng;

use super::*;

/// Twenty small models mixing 0/1 factors and real loadings, `N ≤ 40`,
/// `s ≤ 2`.
pub fn random_models() -> Vec<(Arc<Design>, VarianceComponents, DVector<f64>)> {
    let mut r = rng(7);
    (0..20)
        .map(|i| {
            let design = match i % 5 {
                0 => one_way(r.random_range(3..8), r.random_range(2..5)),
                1 => two_way(r.random_range(2..6), r.random_range(2..6)),
                2 => {
                    let sizes: Vec<usize> = (0..r.random_range(3..7)).map(|_| r.random_range(1..6)).collect();
                    nested(&sizes, &mut r)
                }
                3 => {
                    let sizes: Vec<usize> = (0..r.random_range(3..6)).map(|_| r.random_range(2..6)).collect();
                    intercept_slope(&sizes, &mut r)
                }
                _ => mixed_loadings(r.random_range(12..40), r.random_range(3..6), &mut r),
            };
            assert!(design.n_obs() <= 40 && design.n_terms() <= 2);
            let theta = VarianceComponents::new(
                r.random_range(0.4..2.5),
                (0..design.n_terms()).map(|_| r.random_range(0.1..3.0)).collect(),
            )
            .unwrap();
            let y = normal_response(design.n_obs(), &mut r);
            (design, theta, y)
        })
        .collect()
}

fn shifted(theta: &VarianceComponents, j: usize, h: f64) -> VarianceComponents {
    let mut v = theta.to_vector();
    v[j] += h;
    VarianceComponents::from_slice(v.as_slice()).unwrap()
}

fn central<F: Fn(&VarianceComponents) -> f64>(f: F, theta: &VarianceComponents, j: usize) -> f64 {
    let h = 1e-5;
    (f(&shifted(theta, j, h)) - f(&shifted(theta, j, -h))) / (2.0 * h)
}

fn assert_gradient(analytic: f64, fd: f64, scale: f64, what: &str) {
    // relative error with the score vector norm as floor for components
    // that vanish at the evaluation point
    let s = analytic.abs().max(fd.abs()).max(1e-3 * scale);
    assert!((analytic - fd).abs() <= 1e-6 * s, "{what}: {analytic} vs {fd}");
}

pub fn reml_score_matches_finite_differences() {
    for (i, (design, theta, y)) in random_models().into_iter().enumerate() {
        let model = model(&design, y);
        let score = reml_score(&theta, &model).unwrap();
        for j in 0..score.len() {
            let fd = central(|t| reml_loglik(t, &model).unwrap(), &theta, j);
            assert_gradient(score[j], fd, score.norm(), &format!("model {i} component {j}"));
        }
    }
}

pub fn ml_score_matches_finite_differences() {
    let mut r = rng(8);
    for (i, (design, theta, y)) in random_models().into_iter().enumerate() {
        let model = model(&design, y);
        let beta = FixedEffects::new(DVector::from_fn(design.n_fixed(), |_, _| r.random_range(0.0..2.0))).unwrap();
        let score = ml_score(&beta, &theta, &model).unwrap();
        let p = design.n_fixed();
        for j in 0..p {
            let h = 1e-5;
            let mut plus = beta.clone();
            plus.beta[j] += h;
            let mut minus = beta.clone();
            minus.beta[j] -= h;
            let fd = (ml_loglik(&plus, &theta, &model).unwrap() - ml_loglik(&minus, &theta, &model).unwrap()) / (2.0 * h);
            assert_gradient(score[j], fd, score.norm(), &format!("model {i} beta {j}"));
        }
        for j in 0..theta.len() {
            let fd = central(|t| ml_loglik(&beta, t, &model).unwrap(), &theta, j);
            assert_gradient(score[p + j], fd, score.norm(), &format!("model {i} theta {j}"));
        }
    }
}

fn trace_oracle(forms: &[DMatrix<f64>], v: &DMatrix<f64>) -> DMatrix<f64> {
    let n = forms.len();
    let fv: Vec<DMatrix<f64>> = forms.iter().map(|f| f * v).collect();
    DMatrix::from_fn(n, n, |j, k| -2.0 * (&fv[j] * &fv[k]).trace())
}

pub fn expected_hessians_match_trace_products() {
    for (i, (design, theta, y)) in random_models().into_iter().enumerate() {
        let model = model(&design, y);
        let v = build_covariance(&theta, &design).unwrap();
        let reml = reml_expected_hessian(&theta, &model).unwrap();
        let oracle = trace_oracle(&RemlScoreParts::new(&theta, &design).unwrap().b, &v);
        assert!((&reml - &oracle).amax() <= 1e-8 * oracle.amax(), "model {i} REML");

        let beta = FixedEffects::zeros(design.n_fixed());
        let ml = ml_expected_hessian(&beta, &theta, &model).unwrap();
        let parts = MlScoreParts::new(&theta, &design).unwrap();
        let p = design.n_fixed();
        let q = theta.len();
        let theta_block = trace_oracle(&parts.c, &v);
        let vinv_x = DMatrix::from_columns(&parts.q);
        let beta_block = -(design.x().transpose() * vinv_x);
        let scale = theta_block.amax().max(beta_block.amax());
        assert!((ml.view((p, p), (q, q)) - &theta_block).amax() <= 1e-8 * scale, "model {i} ML θ");
        assert!((ml.view((0, 0), (p, p)) - &beta_block).amax() <= 1e-8 * scale, "model {i} ML β");
        assert_eq!(ml.view((0, p), (p, q)).amax(), 0.0);
    }
}
