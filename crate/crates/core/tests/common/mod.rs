#![allow(dead_code)]

pub mod brute;
pub mod closed_forms;
pub mod gradients;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use poquim_core::{Design, ModelSpec, RandomTerm, TermKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn one_way(m: usize, n: usize) -> Arc<Design> {
    let levels: Vec<usize> = (0..m * n).map(|i| i / n).collect();
    Arc::new(
        Design::new(
            DMatrix::from_element(m * n, 1, 1.0),
            vec![RandomTerm::from_levels("group", &levels)],
            vec!["mu".into()],
        )
        .unwrap(),
    )
}

pub fn two_way(m: usize, n: usize) -> Arc<Design> {
    let rows: Vec<usize> = (0..m * n).map(|i| i / n).collect();
    let cols: Vec<usize> = (0..m * n).map(|i| i % n).collect();
    Arc::new(
        Design::new(
            DMatrix::from_element(m * n, 1, 1.0),
            vec![RandomTerm::from_levels("v", &rows), RandomTerm::from_levels("w", &cols)],
            vec!["mu".into()],
        )
        .unwrap(),
    )
}

/// Unbalanced nested groups with a covariate.
pub fn nested(sizes: &[usize], rng: &mut ChaCha8Rng) -> Arc<Design> {
    let n: usize = sizes.iter().sum();
    let levels: Vec<usize> = sizes.iter().enumerate().flat_map(|(g, &k)| std::iter::repeat_n(g, k)).collect();
    let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
    Arc::new(Design::new(x, vec![RandomTerm::from_levels("g", &levels)], vec![]).unwrap())
}

/// Random intercept and random slope per subject with distinct times.
pub fn intercept_slope(sizes: &[usize], rng: &mut ChaCha8Rng) -> Arc<Design> {
    let n: usize = sizes.iter().sum();
    let levels: Vec<usize> = sizes.iter().enumerate().flat_map(|(g, &k)| std::iter::repeat_n(g, k)).collect();
    let times: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { times[i] });
    let a = RandomTerm::from_levels("a", &levels);
    let mut b = a.matrix.clone();
    for (i, &t) in times.iter().enumerate() {
        b.row_mut(i).scale_mut(t);
    }
    Arc::new(Design::new(x, vec![a, RandomTerm::new("b", TermKind::Weighted, b)], vec![]).unwrap())
}

/// Mixed 0/1 factor plus a real-valued loading term with zero rows.
pub fn mixed_loadings(n: usize, groups: usize, rng: &mut ChaCha8Rng) -> Arc<Design> {
    let levels: Vec<usize> = (0..n).map(|i| i % groups).collect();
    let a = RandomTerm::from_levels("a", &levels);
    let m2 = (n / 3).max(1);
    let mut b = DMatrix::zeros(n, m2);
    for i in 0..n {
        if rng.random_bool(0.8) {
            b[(i, rng.random_range(0..m2))] = rng.random_range(0.3..1.7);
        }
    }
    let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
    Arc::new(Design::new(x, vec![a, RandomTerm::new("b", TermKind::Weighted, b)], vec![]).unwrap())
}

pub fn normal_response(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal) + 1.0)
}

pub fn model(design: &Arc<Design>, y: DVector<f64>) -> ModelSpec {
    ModelSpec::new(y, Arc::clone(design)).unwrap()
}

pub fn assert_rel(actual: f64, expected: f64, tol: f64, what: &str) {
    let scale = actual.abs().max(expected.abs());
    assert!(
        (actual - expected).abs() <= tol * scale + 1e-300,
        "{what}: {actual} vs {expected} (rel {:e})",
        (actual - expected).abs() / scale
    );
}

/// `|actual − expected| ≤ tol · max(|actual|, |expected|, scale)` for entries
/// that may cancel to zero.
pub fn assert_close(actual: f64, expected: f64, tol: f64, scale: f64, what: &str) {
    let s = actual.abs().max(expected.abs()).max(scale.abs());
    assert!(
        (actual - expected).abs() <= tol * s,
        "{what}: {actual} vs {expected} (scaled error {:e})",
        (actual - expected).abs() / s
    );
}
