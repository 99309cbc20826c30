//! Mixed linear model `y = Xβ + Z₁α₁ + … + Z_sα_s + ε` in Hartley–Rao form.
//!
//! A [`Design`] holds the fixed-effect matrix and the random-effect design
//! matrices together with the sparse structure derived from them: per-row
//! nonzeros, per-column supports (the groups used by the index-class
//! enumeration) and the connected components of the random-effect columns.
//! Two columns are connected when they load on a common observation, so the
//! covariance matrix `V` is block diagonal over components.
//!
//! The dense operations in this module ([`build_covariance`],
//! [`build_projection`]) materialize `N × N` matrices and are meant for small
//! models and cross-checks. Fitting and POQUIM assembly go through
//! [`crate::system`], which never forms `V`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::GlsSystem;

/// How a random-effect term loads on observations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    /// Grouping factor: every observation loads on at least one level.
    Factor,
    /// Weighted (slope-type) term: rows may be entirely zero.
    Weighted,
}

#[derive(Clone, Debug)]
pub struct RandomTerm {
    pub name: String,
    pub kind: TermKind,
    pub matrix: DMatrix<f64>,
}

impl RandomTerm {
    pub fn new(name: impl Into<String>, kind: TermKind, matrix: DMatrix<f64>) -> Self {
        Self {
            name: name.into(),
            kind,
            matrix,
        }
    }

    /// 0/1 indicator design for a factor given the level of each observation.
    pub fn from_levels(name: impl Into<String>, levels: &[usize]) -> Self {
        let m = levels.iter().copied().max().map_or(0, |l| l + 1);
        let mut matrix = DMatrix::zeros(levels.len(), m);
        for (i, &l) in levels.iter().enumerate() {
            matrix[(i, l)] = 1.0;
        }
        Self::new(name, TermKind::Factor, matrix)
    }
}

/// A connected block of random-effect columns and the rows they load on.
#[derive(Clone, Debug)]
pub struct Component {
    /// Global random-effect column indices, ascending.
    pub columns: Vec<usize>,
    /// Observation indices, ascending.
    pub rows: Vec<usize>,
    /// `Z_b' Z_b` over `columns`.
    pub gram: DMatrix<f64>,
}

/// Fixed and random design of a mixed linear model (response-free).
#[derive(Clone, Debug)]
pub struct Design {
    x: DMatrix<f64>,
    fixed_labels: Vec<String>,
    terms: Vec<RandomTerm>,
    offsets: Vec<usize>,
    column_term: Vec<usize>,
    row_nonzeros: Vec<Vec<(usize, f64)>>,
    column_supports: Vec<Vec<(usize, f64)>>,
    components: Vec<Component>,
    column_location: Vec<(usize, usize)>,
    row_component: Vec<Option<usize>>,
}

impl Design {
    /// Builds and validates a design. `fixed_labels` may be empty, in which
    /// case columns are named `x0, x1, …`.
    pub fn new(x: DMatrix<f64>, terms: Vec<RandomTerm>, fixed_labels: Vec<String>) -> Result<Self> {
        let n = x.nrows();
        let p = x.ncols();
        if n == 0 {
            return Err(Error::InvalidModel("no observations".into()));
        }
        if p == 0 {
            return Err(Error::InvalidModel("fixed design has no columns".into()));
        }
        if p > n {
            return Err(Error::RankDeficient { rank: n, p });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("non-finite entry in X".into()));
        }
        let fixed_labels = if fixed_labels.is_empty() {
            (0..p).map(|j| format!("x{j}")).collect()
        } else if fixed_labels.len() == p {
            fixed_labels
        } else {
            return Err(Error::Dimension(format!(
                "{} fixed labels for {p} columns",
                fixed_labels.len()
            )));
        };

        for term in &terms {
            if term.matrix.nrows() != n {
                return Err(Error::Dimension(format!(
                    "term '{}' has {} rows, expected {n}",
                    term.name,
                    term.matrix.nrows()
                )));
            }
            if term.matrix.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel(format!(
                    "non-finite entry in term '{}'",
                    term.name
                )));
            }
            if term.kind == TermKind::Factor {
                if let Some(i) = (0..n).find(|&i| term.matrix.row(i).iter().all(|&v| v == 0.0)) {
                    return Err(Error::InvalidModel(format!(
                        "row {i} of factor term '{}' is entirely zero; declare the term as weighted",
                        term.name
                    )));
                }
            }
        }

        let rank = numerical_rank(&x);
        if rank < p {
            return Err(Error::RankDeficient { rank, p });
        }

        let mut offsets = Vec::with_capacity(terms.len() + 1);
        let mut column_term = Vec::new();
        let mut total = 0;
        for (t, term) in terms.iter().enumerate() {
            offsets.push(total);
            total += term.matrix.ncols();
            column_term.extend(std::iter::repeat_n(t, term.matrix.ncols()));
        }
        offsets.push(total);

        let mut row_nonzeros = vec![Vec::new(); n];
        let mut column_supports = vec![Vec::new(); total];
        for (t, term) in terms.iter().enumerate() {
            for l in 0..term.matrix.ncols() {
                let c = offsets[t] + l;
                for i in 0..n {
                    let v = term.matrix[(i, l)];
                    if v != 0.0 {
                        row_nonzeros[i].push((c, v));
                        column_supports[c].push((i, v));
                    }
                }
            }
        }
        for row in &mut row_nonzeros {
            row.sort_by_key(|&(c, _)| c);
        }

        let (components, column_location, row_component) =
            connected_components(n, total, &row_nonzeros, &column_supports);

        Ok(Self {
            x,
            fixed_labels,
            terms,
            offsets,
            column_term,
            row_nonzeros,
            column_supports,
            components,
            column_location,
            row_component,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_fixed(&self) -> usize {
        self.x.ncols()
    }

    /// Number of random-effect terms `s`.
    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    /// Total number of random-effect columns across terms.
    pub fn n_random_columns(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn fixed_labels(&self) -> &[String] {
        &self.fixed_labels
    }

    pub fn terms(&self) -> &[RandomTerm] {
        &self.terms
    }

    pub fn term(&self, t: usize) -> &RandomTerm {
        &self.terms[t]
    }

    /// Global column range of term `t` (zero-based over the random terms).
    pub fn term_columns(&self, t: usize) -> std::ops::Range<usize> {
        self.offsets[t]..self.offsets[t + 1]
    }

    pub fn column_term(&self, c: usize) -> usize {
        self.column_term[c]
    }

    /// Nonzero `(global column, value)` pairs of row `i`, ascending by column.
    pub fn row_nonzeros(&self, i: usize) -> &[(usize, f64)] {
        &self.row_nonzeros[i]
    }

    /// Nonzero `(row, value)` pairs of global column `c`.
    pub fn column_support(&self, c: usize) -> &[(usize, f64)] {
        &self.column_supports[c]
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// `(component, position within component)` of a global column.
    pub fn column_location(&self, c: usize) -> (usize, usize) {
        self.column_location[c]
    }

    pub fn row_component(&self, i: usize) -> Option<usize> {
        self.row_component[i]
    }

    /// `Z' v` over all random columns.
    pub fn zt_vector(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_random_columns());
        for (i, row) in self.row_nonzeros.iter().enumerate() {
            for &(c, z) in row {
                out[c] += z * v[i];
            }
        }
        out
    }

    /// Same design with the random terms reordered by `order`.
    pub fn permute_terms(&self, order: &[usize]) -> Result<Self> {
        let terms = order.iter().map(|&t| self.terms[t].clone()).collect();
        Self::new(self.x.clone(), terms, self.fixed_labels.clone())
    }
}

fn numerical_rank(x: &DMatrix<f64>) -> usize {
    let sv = x.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    let tol = max * (x.nrows().max(x.ncols()) as f64) * f64::EPSILON;
    sv.iter().filter(|&&s| s > tol).count()
}

type ComponentParts = (Vec<Component>, Vec<(usize, usize)>, Vec<Option<usize>>);

fn connected_components(
    n: usize,
    n_cols: usize,
    row_nonzeros: &[Vec<(usize, f64)>],
    column_supports: &[Vec<(usize, f64)>],
) -> ComponentParts {
    let mut parent: Vec<usize> = (0..n_cols).collect();
    fn find(parent: &mut [usize], mut a: usize) -> usize {
        while parent[a] != a {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        a
    }
    for row in row_nonzeros {
        if let Some(&(first, _)) = row.first() {
            for &(c, _) in &row[1..] {
                let (ra, rb) = (find(&mut parent, first), find(&mut parent, c));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }

    let mut root_index = vec![usize::MAX; n_cols];
    let mut members: Vec<Vec<usize>> = Vec::new();
    for c in 0..n_cols {
        let r = find(&mut parent, c);
        if root_index[r] == usize::MAX {
            root_index[r] = members.len();
            members.push(Vec::new());
        }
        members[root_index[r]].push(c);
    }

    let mut column_location = vec![(0, 0); n_cols];
    for (b, cols) in members.iter().enumerate() {
        for (k, &c) in cols.iter().enumerate() {
            column_location[c] = (b, k);
        }
    }
    let mut row_component = vec![None; n];
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); members.len()];
    for (i, row) in row_nonzeros.iter().enumerate() {
        if let Some(&(c, _)) = row.first() {
            let b = column_location[c].0;
            row_component[i] = Some(b);
            rows[b].push(i);
        }
    }

    let components = members
        .into_iter()
        .zip(rows)
        .map(|(columns, rows)| {
            let k = columns.len();
            let mut gram = DMatrix::zeros(k, k);
            for &i in &rows {
                let nz = &row_nonzeros[i];
                for &(c1, v1) in nz {
                    let a = column_location[c1].1;
                    for &(c2, v2) in nz {
                        gram[(a, column_location[c2].1)] += v1 * v2;
                    }
                }
            }
            debug_assert!(columns.iter().all(|&c| column_supports[c]
                .iter()
                .all(|&(i, _)| row_component[i] == Some(column_location[c].0))));
            Component {
                columns,
                rows,
                gram,
            }
        })
        .collect();

    (components, column_location, row_component)
}

/// Response vector paired with a shared design.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub y: DVector<f64>,
    pub design: Arc<Design>,
}

impl ModelSpec {
    pub fn new(y: DVector<f64>, design: Arc<Design>) -> Result<Self> {
        if y.len() != design.n_obs() {
            return Err(Error::Dimension(format!(
                "response has length {}, design has {} rows",
                y.len(),
                design.n_obs()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("non-finite response value".into()));
        }
        Ok(Self { y, design })
    }

    /// Same design, new response.
    pub fn with_response(&self, y: DVector<f64>) -> Result<Self> {
        Self::new(y, Arc::clone(&self.design))
    }

    pub fn n_obs(&self) -> usize {
        self.design.n_obs()
    }

    pub fn n_fixed(&self) -> usize {
        self.design.n_fixed()
    }

    pub fn n_terms(&self) -> usize {
        self.design.n_terms()
    }
}

/// Hartley–Rao variance components: `λ = σ₀²` and `γ_t = σ_t²/σ₀²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub lambda: f64,
    pub gamma: Vec<f64>,
}

impl VarianceComponents {
    pub fn new(lambda: f64, gamma: Vec<f64>) -> Result<Self> {
        let theta = Self { lambda, gamma };
        theta.validate()?;
        Ok(theta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::InvalidParameters(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if let Some(g) = self.gamma.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
            return Err(Error::InvalidParameters(format!(
                "variance ratios must be non-negative, got {g}"
            )));
        }
        Ok(())
    }

    /// `(λ, γ₁, …, γ_s)`.
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.gamma.len() + 1,
            std::iter::once(self.lambda).chain(self.gamma.iter().copied()),
        )
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v.split_first() {
            Some((&lambda, gamma)) => Self::new(lambda, gamma.to_vec()),
            None => Err(Error::InvalidParameters("empty parameter vector".into())),
        }
    }

    pub fn len(&self) -> usize {
        self.gamma.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Variance of term `t` with `t = 0` the error: `σ_t² = λγ_t`.
    pub fn sigma2(&self, t: usize) -> f64 {
        if t == 0 {
            self.lambda
        } else {
            self.lambda * self.gamma[t - 1]
        }
    }

    pub(crate) fn check_terms(&self, design: &Design) -> Result<()> {
        self.validate()?;
        if self.gamma.len() != design.n_terms() {
            return Err(Error::Dimension(format!(
                "{} variance ratios for {} random terms",
                self.gamma.len(),
                design.n_terms()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FixedEffects {
    pub beta: DVector<f64>,
}

impl From<FixedEffects> for Vec<f64> {
    fn from(b: FixedEffects) -> Self {
        b.beta.as_slice().to_vec()
    }
}

impl TryFrom<Vec<f64>> for FixedEffects {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(DVector::from_vec(v))
    }
}

impl FixedEffects {
    pub fn new(beta: DVector<f64>) -> Result<Self> {
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidParameters("non-finite fixed effect".into()));
        }
        Ok(Self { beta })
    }

    pub fn zeros(p: usize) -> Self {
        Self {
            beta: DVector::zeros(p),
        }
    }
}

/// Dense `V = λ(I + Σ γ_t Z_t Z_t')`.
pub fn build_covariance(theta: &VarianceComponents, design: &Design) -> Result<DMatrix<f64>> {
    theta.check_terms(design)?;
    let n = design.n_obs();
    let mut v = DMatrix::identity(n, n);
    for (term, &g) in design.terms().iter().zip(&theta.gamma) {
        if g != 0.0 {
            let z = &term.matrix;
            v += g * z * z.transpose();
        }
    }
    Ok(v * theta.lambda)
}

/// Dense REML projection `P = V⁻¹ − V⁻¹X(X'V⁻¹X)⁻¹X'V⁻¹`.
pub fn build_projection(theta: &VarianceComponents, design: &Design) -> Result<DMatrix<f64>> {
    let v = build_covariance(theta, design)?;
    let n = v.nrows();
    let chol = v
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("V".into()))?;
    let vinv = chol.solve(&DMatrix::identity(n, n));
    let vinv_x = &vinv * design.x();
    let h = design.x().transpose() * &vinv_x;
    let h_chol = h
        .cholesky()
        .ok_or_else(|| Error::Singular("X'V⁻¹X".into()))?;
    let correction = &vinv_x * h_chol.solve(&vinv_x.transpose());
    let mut p = vinv - correction;
    symmetrize(&mut p);
    Ok(p)
}

/// Generalized least-squares estimate `(X'V⁻¹X)⁻¹X'V⁻¹y` at `theta`.
pub fn gls_beta(theta: &VarianceComponents, model: &ModelSpec) -> Result<FixedEffects> {
    let system = GlsSystem::new(&model.design, theta)?;
    FixedEffects::new(system.gls_beta(&model.y))
}

/// `u = y − Xβ`.
pub fn residuals(beta: &FixedEffects, model: &ModelSpec) -> Result<DVector<f64>> {
    if beta.beta.len() != model.n_fixed() {
        return Err(Error::Dimension(format!(
            "beta has length {}, X has {} columns",
            beta.beta.len(),
            model.n_fixed()
        )));
    }
    Ok(&model.y - model.design.x() * &beta.beta)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let a = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = a;
            m[(j, i)] = a;
        }
    }
}
