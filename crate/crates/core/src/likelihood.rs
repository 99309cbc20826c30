//! Gaussian quasi-restricted and quasi-full log-likelihoods, their scores and
//! expected Hessians, and the maximizers that produce REML/ML estimates.
//!
//! The additive constant of both log-likelihoods is zero, and the REML
//! determinant term uses `log|V| + log|X'V⁻¹X|` in place of `log|T'VT|`; the
//! two differ by a θ-free constant, so scores, Hessians and likelihood
//! differences are unaffected.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_projection, Design, FixedEffects, ModelSpec, VarianceComponents};
use crate::system::GlsSystem;

/// Which quasi-likelihood is maximized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Reml,
    Ml,
}

/// Dense `B_j` and `b_j = E(u'B_j u)` of the REML score `u'B_j u − b_j`.
#[derive(Clone, Debug)]
pub struct RemlScoreParts {
    pub b: Vec<DMatrix<f64>>,
    pub expectation: Vec<f64>,
}

impl RemlScoreParts {
    /// `B₀ = P/2λ`, `B_j = (λ/2) P Z_j Z_j' P`. Materializes `s + 1` dense
    /// `N × N` matrices.
    pub fn new(theta: &VarianceComponents, design: &Design) -> Result<Self> {
        let p = build_projection(theta, design)?;
        let lambda = theta.lambda;
        let n = design.n_obs() as f64;
        let rank = design.n_fixed() as f64;
        let mut b = vec![&p / (2.0 * lambda)];
        let mut expectation = vec![(n - rank) / (2.0 * lambda)];
        for term in design.terms() {
            let pz = &p * &term.matrix;
            b.push(&pz * pz.transpose() * (lambda / 2.0));
            expectation.push(lambda / 2.0 * (term.matrix.transpose() * &pz).trace());
        }
        Ok(Self { b, expectation })
    }
}

/// Dense `C_j`, `c_j = E(u'C_j u)` and `q_j = V⁻¹X_j` of the ML score.
#[derive(Clone, Debug)]
pub struct MlScoreParts {
    pub c: Vec<DMatrix<f64>>,
    pub expectation: Vec<f64>,
    pub q: Vec<DVector<f64>>,
}

impl MlScoreParts {
    pub fn new(theta: &VarianceComponents, design: &Design) -> Result<Self> {
        let v = crate::model::build_covariance(theta, design)?;
        let n = v.nrows();
        let vinv = v
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("V".into()))?
            .solve(&DMatrix::identity(n, n));
        let lambda = theta.lambda;
        let mut c = vec![&vinv / (2.0 * lambda)];
        let mut expectation = vec![n as f64 / (2.0 * lambda)];
        for term in design.terms() {
            let vz = &vinv * &term.matrix;
            c.push(&vz * vz.transpose() * (lambda / 2.0));
            expectation.push(lambda / 2.0 * (term.matrix.transpose() * &vz).trace());
        }
        let vx = &vinv * design.x();
        let q = (0..vx.ncols()).map(|j| vx.column(j).into_owned()).collect();
        Ok(Self { c, expectation, q })
    }
}

/// Log-likelihood, score and expected Hessian at one parameter point.
#[derive(Clone, Debug)]
pub(crate) struct Evaluation {
    pub loglik: f64,
    pub score: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub beta: DVector<f64>,
}

/// Gaussian-information blocks shared by REML (`K = Z'PZ`, `d = N − p`) and
/// ML (`K = Z'V⁻¹Z`, `d = N`): entries `2 tr(B_j V B_k V)`.
pub(crate) fn gaussian_information(
    design: &Design,
    lambda: f64,
    k: &DMatrix<f64>,
    dof: f64,
) -> DMatrix<f64> {
    let s = design.n_terms();
    let mut g = DMatrix::zeros(s + 1, s + 1);
    g[(0, 0)] = dof / (2.0 * lambda * lambda);
    for t in 0..s {
        let ct = design.term_columns(t);
        let tr = (0..ct.len()).map(|a| k[(ct.start + a, ct.start + a)]).sum::<f64>();
        g[(0, t + 1)] = 0.5 * tr;
        g[(t + 1, 0)] = 0.5 * tr;
        for u in t..s {
            let cu = design.term_columns(u);
            let block = k.view((ct.start, cu.start), (ct.len(), cu.len()));
            let f = 0.5 * lambda * lambda * block.norm_squared();
            g[(t + 1, u + 1)] = f;
            g[(u + 1, t + 1)] = f;
        }
    }
    g
}

fn quadratic_score(
    design: &Design,
    lambda: f64,
    weighted: &DVector<f64>,
    quad: f64,
    k: &DMatrix<f64>,
    dof: f64,
) -> DVector<f64> {
    let s = design.n_terms();
    let zw = design.zt_vector(weighted);
    let mut score = DVector::zeros(s + 1);
    score[0] = (quad - dof) / (2.0 * lambda);
    for t in 0..s {
        let ct = design.term_columns(t);
        let norm2 = zw.rows(ct.start, ct.len()).norm_squared();
        let tr = (0..ct.len()).map(|a| k[(ct.start + a, ct.start + a)]).sum::<f64>();
        score[t + 1] = 0.5 * lambda * (norm2 - tr);
    }
    score
}

pub(crate) fn evaluate_reml(theta: &VarianceComponents, model: &ModelSpec) -> Result<Evaluation> {
    let design = &*model.design;
    let system = GlsSystem::new(design, theta)?;
    let beta = system.gls_beta(&model.y);
    let r = &model.y - design.x() * &beta;
    let py = system.covariance().solve(&r);
    let quad = r.dot(&py);
    let loglik = -0.5 * (system.log_det_v() + system.log_det_h() + quad);
    let k = system.zt_project_z();
    let dof = (design.n_obs() - design.n_fixed()) as f64;
    let score = quadratic_score(design, theta.lambda, &py, quad, &k, dof);
    let hessian = -gaussian_information(design, theta.lambda, &k, dof);
    Ok(Evaluation {
        loglik,
        score,
        hessian,
        beta,
    })
}

/// ML quantities at `(β, θ)`. The returned score and Hessian cover `θ` only;
/// `beta` is echoed back.
pub(crate) fn evaluate_ml_theta(
    beta: &DVector<f64>,
    system: &GlsSystem<'_>,
    model: &ModelSpec,
) -> Evaluation {
    let design = &*model.design;
    let lambda = system.lambda();
    let u = &model.y - design.x() * beta;
    let vinv_u = system.covariance().solve(&u);
    let quad = u.dot(&vinv_u);
    let loglik = -0.5 * (system.log_det_v() + quad);
    let k = system.covariance().zt_solve_z();
    let dof = design.n_obs() as f64;
    let score = quadratic_score(design, lambda, &vinv_u, quad, &k, dof);
    let hessian = -gaussian_information(design, lambda, &k, dof);
    Evaluation {
        loglik,
        score,
        hessian,
        beta: beta.clone(),
    }
}

fn evaluate_ml_profile(theta: &VarianceComponents, model: &ModelSpec) -> Result<Evaluation> {
    let system = GlsSystem::new(&model.design, theta)?;
    let beta = system.gls_beta(&model.y);
    Ok(evaluate_ml_theta(&beta, &system, model))
}

/// Quasi-restricted log-likelihood `−½{log|V| + log|X'V⁻¹X| + y'Py}`.
pub fn reml_loglik(theta: &VarianceComponents, model: &ModelSpec) -> Result<f64> {
    Ok(evaluate_reml(theta, model)?.loglik)
}

/// `∂l_R/∂θ_j = u'B_j u − b_j` for `θ = (λ, γ₁, …, γ_s)`.
pub fn reml_score(theta: &VarianceComponents, model: &ModelSpec) -> Result<DVector<f64>> {
    Ok(evaluate_reml(theta, model)?.score)
}

/// `E(∂²l_R/∂θ∂θ') = −2{tr(B_j V B_k V)}`.
pub fn reml_expected_hessian(theta: &VarianceComponents, model: &ModelSpec) -> Result<DMatrix<f64>> {
    Ok(evaluate_reml(theta, model)?.hessian)
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

/// Quasi-log-likelihood `−½{log|V| + (y − Xβ)'V⁻¹(y − Xβ)}`.
pub fn ml_loglik(beta: &FixedEffects, theta: &VarianceComponents, model: &ModelSpec) -> Result<f64> {
    check_beta(beta, &model.design)?;
    let system = GlsSystem::new(&model.design, theta)?;
    Ok(evaluate_ml_theta(&beta.beta, &system, model).loglik)
}

/// Score over `ψ = (β', θ')'`: `X'V⁻¹u` followed by `u'C_j u − c_j`.
pub fn ml_score(
    beta: &FixedEffects,
    theta: &VarianceComponents,
    model: &ModelSpec,
) -> Result<DVector<f64>> {
    check_beta(beta, &model.design)?;
    let design = &*model.design;
    let system = GlsSystem::new(design, theta)?;
    let eval = evaluate_ml_theta(&beta.beta, &system, model);
    let u = &model.y - design.x() * &beta.beta;
    let score_beta = system.vinv_x().transpose() * u;
    let p = design.n_fixed();
    let mut score = DVector::zeros(p + eval.score.len());
    score.rows_mut(0, p).copy_from(&score_beta);
    score.rows_mut(p, eval.score.len()).copy_from(&eval.score);
    Ok(score)
}

/// Block-diagonal expected Hessian over `ψ`: `−X'V⁻¹X` and `−2{tr(C_j V C_k V)}`.
pub fn ml_expected_hessian(
    beta: &FixedEffects,
    theta: &VarianceComponents,
    model: &ModelSpec,
) -> Result<DMatrix<f64>> {
    check_beta(beta, &model.design)?;
    let design = &*model.design;
    let system = GlsSystem::new(design, theta)?;
    let eval = evaluate_ml_theta(&beta.beta, &system, model);
    let p = design.n_fixed();
    let q = eval.hessian.nrows();
    let mut h = DMatrix::zeros(p + q, p + q);
    h.view_mut((0, 0), (p, p))
        .copy_from(&(-system.information_beta()));
    h.view_mut((p, p), (q, q)).copy_from(&eval.hessian);
    Ok(h)
}

/// Starting point for one run of the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Start {
    /// One Fisher-scoring step of the REML equations from `γ = 0` (MINQUE(0)).
    Moment,
    /// OLS residual variance for `λ` and the given value for every `γ_t`.
    Uniform(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Tolerance on the ∞-norm of the projected gradient in `(log λ, γ)`.
    pub tol: f64,
    pub max_iter: usize,
    pub starts: Vec<Start>,
    /// `γ_t` below this value with a non-positive score is set to exactly 0.
    pub boundary_threshold: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            starts: vec![Start::Moment, Start::Uniform(0.5), Start::Uniform(2.0)],
            boundary_threshold: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitResult {
    pub criterion: Criterion,
    pub theta_hat: VarianceComponents,
    /// ML estimate, or GLS at `θ̂` for REML.
    pub beta_hat: FixedEffects,
    pub loglik: f64,
    pub converged: bool,
    /// Per `γ_t`: estimate on the boundary `γ_t = 0`.
    pub boundary: Vec<bool>,
    /// Per `θ` coordinate: held at a caller-supplied value.
    pub pinned: Vec<bool>,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl FitResult {
    pub fn any_boundary(&self) -> bool {
        self.boundary.iter().any(|&b| b)
    }
}

/// Maximizes the quasi-restricted log-likelihood over `λ > 0, γ ≥ 0`.
pub fn fit_reml(model: &ModelSpec, options: &FitOptions) -> Result<FitResult> {
    fit(model, Criterion::Reml, &vec![None; model.n_terms() + 1], options)
}

/// Maximizes the quasi-log-likelihood with `β` profiled out by GLS.
pub fn fit_ml(model: &ModelSpec, options: &FitOptions) -> Result<FitResult> {
    fit(model, Criterion::Ml, &vec![None; model.n_terms() + 1], options)
}

/// REML over the coordinates of `θ` whose entry in `fixed` is `None`.
pub fn fit_reml_constrained(
    model: &ModelSpec,
    fixed: &[Option<f64>],
    options: &FitOptions,
) -> Result<FitResult> {
    fit(model, Criterion::Reml, fixed, options)
}

pub fn fit_ml_constrained(
    model: &ModelSpec,
    fixed: &[Option<f64>],
    options: &FitOptions,
) -> Result<FitResult> {
    fit(model, Criterion::Ml, fixed, options)
}

fn evaluate(criterion: Criterion, theta: &VarianceComponents, model: &ModelSpec) -> Result<Evaluation> {
    match criterion {
        Criterion::Reml => evaluate_reml(theta, model),
        Criterion::Ml => evaluate_ml_profile(theta, model),
    }
}

/// Gradient in `(log λ, γ)` with boundary-active and pinned coordinates zeroed.
fn projected_gradient(theta: &[f64], score: &DVector<f64>, free: &[bool]) -> DVector<f64> {
    DVector::from_iterator(
        theta.len(),
        (0..theta.len()).map(|j| {
            if !free[j] {
                0.0
            } else if j == 0 {
                theta[0] * score[0]
            } else if theta[j] == 0.0 && score[j] <= 0.0 {
                0.0
            } else {
                score[j]
            }
        }),
    )
}

fn ols_variance(model: &ModelSpec) -> Result<f64> {
    let x = model.design.x();
    let xtx = x.transpose() * x;
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::Singular("X'X".into()))?;
    let beta = chol.solve(&(x.transpose() * &model.y));
    let r = &model.y - x * beta;
    let dof = (model.n_obs() - model.n_fixed()).max(1) as f64;
    let v = r.norm_squared() / dof;
    Ok(if v > 0.0 { v } else { 1.0 })
}

fn starting_point(
    start: Start,
    model: &ModelSpec,
    fixed: &[Option<f64>],
    sigma2: f64,
) -> Result<Vec<f64>> {
    let s = model.n_terms();
    let mut theta = match start {
        Start::Uniform(g) => {
            let lambda = sigma2 / (1.0 + g * s as f64);
            std::iter::once(lambda)
                .chain(std::iter::repeat_n(g, s))
                .collect::<Vec<_>>()
        }
        Start::Moment => {
            let base = VarianceComponents::new(sigma2, vec![0.0; s])?;
            let eval = evaluate_reml(&base, model)?;
            let info = -eval.hessian;
            let step = info
                .cholesky()
                .map(|c| c.solve(&eval.score))
                .unwrap_or_else(|| DVector::from_element(s + 1, 0.0));
            let mut t: Vec<f64> = base.to_vector().iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            t[0] = t[0].max(1e-2 * sigma2);
            for g in &mut t[1..] {
                *g = g.max(1e-2);
            }
            t
        }
    };
    for (j, f) in fixed.iter().enumerate() {
        if let Some(v) = f {
            theta[j] = *v;
        }
    }
    Ok(theta)
}

/// Projected-gradient size below which Newton steps on the observed
/// information replace Fisher scoring.
const NEWTON_SWITCH: f64 = 1e-3;

/// `−∂²l/∂θ∂θ'` over `moving` by central differences of the analytic score.
fn observed_information(
    criterion: Criterion,
    model: &ModelSpec,
    theta: &[f64],
    moving: &[usize],
) -> Option<DMatrix<f64>> {
    let k = moving.len();
    let mut h = DMatrix::zeros(k, k);
    for (a, &j) in moving.iter().enumerate() {
        let step = 1e-6 * theta[j].abs().max(1e-2);
        let mut plus = theta.to_vec();
        let mut minus = theta.to_vec();
        plus[j] += step;
        // one-sided at the boundary
        let width = if theta[j] - step > 0.0 {
            minus[j] -= step;
            2.0 * step
        } else {
            step
        };
        let sp = evaluate(criterion, &VarianceComponents::from_slice(&plus).ok()?, model).ok()?.score;
        let sm = evaluate(criterion, &VarianceComponents::from_slice(&minus).ok()?, model).ok()?.score;
        for (b, &i) in moving.iter().enumerate() {
            h[(b, a)] = -(sp[i] - sm[i]) / width;
        }
    }
    let sym = (&h + h.transpose()) * 0.5;
    sym.iter().all(|v| v.is_finite()).then_some(sym)
}

struct Run {
    theta: Vec<f64>,
    eval: Evaluation,
    converged: bool,
    iterations: usize,
    gradient_norm: f64,
}

fn run_scoring(
    criterion: Criterion,
    model: &ModelSpec,
    free: &[bool],
    mut theta: Vec<f64>,
    options: &FitOptions,
) -> Result<Run> {
    let dim = theta.len();
    let mut eval = evaluate(criterion, &VarianceComponents::from_slice(&theta)?, model)?;
    let mut converged = false;
    let mut iterations = 0;
    let mut gnorm = projected_gradient(&theta, &eval.score, free).amax();

    while iterations < options.max_iter {
        if gnorm <= options.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let moving: Vec<usize> = (0..dim)
            .filter(|&j| free[j] && !(j > 0 && theta[j] == 0.0 && eval.score[j] <= 0.0))
            .collect();
        let grad = DVector::from_iterator(moving.len(), moving.iter().map(|&j| eval.score[j]));
        let newton = if gnorm < NEWTON_SWITCH {
            observed_information(criterion, model, &theta, &moving)
                .and_then(|h| h.cholesky())
                .map(|c| c.solve(&grad))
        } else {
            None
        };
        let info = (-&eval.hessian).select_rows(&moving).select_columns(&moving);
        let direction = newton.unwrap_or_else(|| match info.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => DVector::from_iterator(
                moving.len(),
                (0..moving.len()).map(|a| grad[a] / info[(a, a)].abs().max(1e-12)),
            ),
        });

        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-12 {
            let mut cand = theta.clone();
            for (a, &j) in moving.iter().enumerate() {
                cand[j] += alpha * direction[a];
            }
            if cand[0] <= 0.0 {
                alpha *= 0.5;
                continue;
            }
            for g in &mut cand[1..] {
                if *g < 0.0 {
                    *g = 0.0;
                }
            }
            if let Ok(e) = evaluate(criterion, &VarianceComponents::from_slice(&cand)?, model) {
                if e.loglik.is_finite() && e.loglik >= eval.loglik - 1e-12 * (1.0 + eval.loglik.abs()) {
                    accepted = Some((cand, e));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((cand, e)) => {
                theta = cand;
                eval = e;
                gnorm = projected_gradient(&theta, &eval.score, free).amax();
            }
            None => break,
        }
    }
    if gnorm <= options.tol {
        converged = true;
    }
    Ok(Run {
        theta,
        eval,
        converged,
        iterations,
        gradient_norm: gnorm,
    })
}

fn fit(
    model: &ModelSpec,
    criterion: Criterion,
    fixed: &[Option<f64>],
    options: &FitOptions,
) -> Result<FitResult> {
    let s = model.n_terms();
    if fixed.len() != s + 1 {
        return Err(Error::Dimension(format!(
            "{} pinned entries for {} variance components",
            fixed.len(),
            s + 1
        )));
    }
    if let Some(Some(l)) = fixed.first() {
        if *l <= 0.0 {
            return Err(Error::InvalidParameters("pinned lambda must be positive".into()));
        }
    }
    if fixed[1..].iter().flatten().any(|g| *g < 0.0) {
        return Err(Error::InvalidParameters("pinned gamma must be non-negative".into()));
    }
    let free: Vec<bool> = fixed.iter().map(|f| f.is_none()).collect();
    let sigma2 = ols_variance(model)?;

    let starts: Vec<Start> = if free.iter().any(|&f| f) && !options.starts.is_empty() {
        options.starts.clone()
    } else {
        vec![Start::Uniform(1.0)]
    };

    let mut best: Option<Run> = None;
    let mut last_err = None;
    for start in starts {
        let run = starting_point(start, model, fixed, sigma2)
            .and_then(|theta0| run_scoring(criterion, model, &free, theta0, options));
        match run {
            Ok(run) => {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        (run.converged && !b.converged)
                            || (run.converged == b.converged && run.eval.loglik > b.eval.loglik)
                    }
                };
                if better {
                    best = Some(run);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let mut run = match best {
        Some(r) => r,
        None => return Err(last_err.unwrap_or_else(|| Error::Config("no starting points".into()))),
    };

    // snap near-zero ratios that push outward onto the boundary
    let mut snapped = false;
    for j in 1..=s {
        if free[j]
            && run.theta[j] > 0.0
            && run.theta[j] < options.boundary_threshold
            && run.eval.score[j] <= 0.0
        {
            run.theta[j] = 0.0;
            snapped = true;
        }
    }
    if snapped {
        let theta = VarianceComponents::from_slice(&run.theta)?;
        run.eval = evaluate(criterion, &theta, model)?;
        run.gradient_norm = projected_gradient(&run.theta, &run.eval.score, &free).amax();
    }

    let boundary = (1..=s).map(|j| free[j] && run.theta[j] == 0.0).collect();
    Ok(FitResult {
        criterion,
        theta_hat: VarianceComponents::from_slice(&run.theta)?,
        beta_hat: FixedEffects::new(run.eval.beta.clone())?,
        loglik: run.eval.loglik,
        converged: run.converged,
        boundary,
        pinned: fixed.iter().map(|f| f.is_some()).collect(),
        iterations: run.iterations,
        gradient_norm: run.gradient_norm,
    })
}
