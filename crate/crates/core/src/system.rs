//! Structured evaluation of `V⁻¹` and `P` without forming `N × N` matrices.
//!
//! With `Z_a` the columns of terms with `γ_t > 0` and `D = diag(γ)` over them,
//! `V = λ(I + Z_a D Z_a')` and the Woodbury identity gives
//!
//! ```text
//! V⁻¹ = λ⁻¹ (I − Z_a A⁻¹ Z_a'),   A = D⁻¹ + Z_a'Z_a,
//! log|V| = N log λ + log|D| + log|A|.
//! ```
//!
//! `A` is block diagonal over the connected components of the design, so each
//! block is factorized independently. Costs scale with the component sizes,
//! not with `N³`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::model::{symmetrize, Design, VarianceComponents};

struct BlockFactor {
    /// Active index of each local column (`None` for terms with `γ = 0`).
    active: Vec<Option<usize>>,
    /// Local positions of the active columns.
    active_positions: Vec<usize>,
    a_inv: DMatrix<f64>,
}

/// `V⁻¹` and `log|V|` at fixed variance components.
pub struct CovarianceSystem<'a> {
    design: &'a Design,
    lambda: f64,
    gamma: Vec<f64>,
    blocks: Vec<BlockFactor>,
    logdet: f64,
}

impl<'a> CovarianceSystem<'a> {
    pub fn new(design: &'a Design, theta: &VarianceComponents) -> Result<Self> {
        theta.check_terms(design)?;
        let lambda = theta.lambda;
        let n = design.n_obs() as f64;
        let mut logdet = n * lambda.ln();
        for (t, &g) in theta.gamma.iter().enumerate() {
            if g > 0.0 {
                logdet += design.term_columns(t).len() as f64 * g.ln();
            }
        }

        let mut blocks = Vec::with_capacity(design.components().len());
        for comp in design.components() {
            let mut active = Vec::with_capacity(comp.columns.len());
            let mut active_positions = Vec::new();
            for (k, &c) in comp.columns.iter().enumerate() {
                if theta.gamma[design.column_term(c)] > 0.0 {
                    active.push(Some(active_positions.len()));
                    active_positions.push(k);
                } else {
                    active.push(None);
                }
            }
            let ka = active_positions.len();
            let mut a = DMatrix::zeros(ka, ka);
            for (r, &kr) in active_positions.iter().enumerate() {
                for (s, &ks) in active_positions.iter().enumerate() {
                    a[(r, s)] = comp.gram[(kr, ks)];
                }
                a[(r, r)] += 1.0 / theta.gamma[design.column_term(comp.columns[kr])];
            }
            let a_inv = if ka == 0 {
                a
            } else {
                let chol = Cholesky::new(a)
                    .ok_or_else(|| Error::NotPositiveDefinite("random-effect block of V".into()))?;
                logdet += 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                chol.inverse()
            };
            blocks.push(BlockFactor {
                active,
                active_positions,
                a_inv,
            });
        }

        Ok(Self {
            design,
            lambda,
            gamma: theta.gamma.clone(),
            blocks,
            logdet,
        })
    }

    pub fn design(&self) -> &'a Design {
        self.design
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn log_det(&self) -> f64 {
        self.logdet
    }

    /// `Z_a' v` restricted to component `b`, in active-local coordinates.
    fn block_zt(&self, b: usize, v: &DVector<f64>) -> DVector<f64> {
        let block = &self.blocks[b];
        let mut w = DVector::zeros(block.active_positions.len());
        for &i in &self.design.components()[b].rows {
            for &(c, z) in self.design.row_nonzeros(i) {
                if let Some(a) = block.active[self.design.column_location(c).1] {
                    w[a] += z * v[i];
                }
            }
        }
        w
    }

    /// `V⁻¹ v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        for (b, comp) in self.design.components().iter().enumerate() {
            let block = &self.blocks[b];
            if block.active_positions.is_empty() || comp.rows.is_empty() {
                continue;
            }
            let w = &block.a_inv * self.block_zt(b, v);
            for &i in &comp.rows {
                let mut acc = 0.0;
                for &(c, z) in self.design.row_nonzeros(i) {
                    if let Some(a) = block.active[self.design.column_location(c).1] {
                        acc += z * w[a];
                    }
                }
                out[i] -= acc;
            }
        }
        out / self.lambda
    }

    /// `V⁻¹ M` column by column.
    pub fn solve_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for j in 0..m.ncols() {
            let col = self.solve(&m.column(j).into_owned());
            out.set_column(j, &col);
        }
        out
    }

    /// Row `i` of `Z_a` inside its component, in active-local coordinates.
    fn active_row(&self, i: usize, b: usize) -> Vec<(usize, f64)> {
        let block = &self.blocks[b];
        self.design
            .row_nonzeros(i)
            .iter()
            .filter_map(|&(c, z)| block.active[self.design.column_location(c).1].map(|a| (a, z)))
            .collect()
    }

    /// Entry `(i, j)` of `V⁻¹`.
    pub fn inverse_entry(&self, i: usize, j: usize) -> f64 {
        let mut value = if i == j { 1.0 } else { 0.0 };
        if let (Some(bi), Some(bj)) = (self.design.row_component(i), self.design.row_component(j)) {
            if bi == bj {
                let a_inv = &self.blocks[bi].a_inv;
                let ri = self.active_row(i, bi);
                let rj = self.active_row(j, bi);
                for &(a, za) in &ri {
                    for &(c, zc) in &rj {
                        value -= za * a_inv[(a, c)] * zc;
                    }
                }
            }
        }
        value / self.lambda
    }

    /// `Z' V⁻¹ M` over all random columns (`M` has `N` rows).
    pub fn zt_solve(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let design = self.design;
        let mut out = DMatrix::zeros(design.n_random_columns(), m.ncols());
        for (b, comp) in design.components().iter().enumerate() {
            let block = &self.blocks[b];
            let k = comp.columns.len();
            let mut zm = DMatrix::zeros(k, m.ncols());
            for &i in &comp.rows {
                for &(c, z) in design.row_nonzeros(i) {
                    let loc = design.column_location(c).1;
                    for j in 0..m.ncols() {
                        zm[(loc, j)] += z * m[(i, j)];
                    }
                }
            }
            if !block.active_positions.is_empty() {
                let za_m = zm.select_rows(&block.active_positions);
                let s_a = comp.gram.select_columns(&block.active_positions);
                zm -= s_a * (&block.a_inv * za_m);
            }
            for (loc, &c) in comp.columns.iter().enumerate() {
                for j in 0..m.ncols() {
                    out[(c, j)] = zm[(loc, j)] / self.lambda;
                }
            }
        }
        out
    }

    /// `Z' V⁻¹ Z` over all random columns; block diagonal by component.
    pub fn zt_solve_z(&self) -> DMatrix<f64> {
        let design = self.design;
        let total = design.n_random_columns();
        let mut out = DMatrix::zeros(total, total);
        for (b, comp) in design.components().iter().enumerate() {
            let block = &self.blocks[b];
            let mut k = comp.gram.clone();
            if !block.active_positions.is_empty() {
                let s_a = comp.gram.select_columns(&block.active_positions);
                k -= &s_a * &block.a_inv * s_a.transpose();
            }
            for (r, &cr) in comp.columns.iter().enumerate() {
                for (s, &cs) in comp.columns.iter().enumerate() {
                    out[(cr, cs)] = k[(r, s)] / self.lambda;
                }
            }
        }
        out
    }

    /// `V⁻¹ Z_t` as a dense `N × m_t` matrix (`t` zero-based over random terms).
    pub fn solve_term(&self, t: usize) -> DMatrix<f64> {
        let design = self.design;
        let cols = design.term_columns(t);
        let n = design.n_obs();
        let mut out = DMatrix::zeros(n, cols.len());
        for c in cols.clone() {
            for &(i, z) in design.column_support(c) {
                out[(i, c - cols.start)] = z;
            }
        }
        for (b, comp) in design.components().iter().enumerate() {
            let block = &self.blocks[b];
            if block.active_positions.is_empty() {
                continue;
            }
            let term_locals: Vec<(usize, usize)> = comp
                .columns
                .iter()
                .enumerate()
                .filter(|(_, &c)| cols.contains(&c))
                .map(|(loc, &c)| (loc, c - cols.start))
                .collect();
            if term_locals.is_empty() {
                continue;
            }
            let locals: Vec<usize> = term_locals.iter().map(|&(loc, _)| loc).collect();
            // A⁻¹ (Z_a' Z_t) restricted to this component
            let s_at = comp
                .gram
                .select_rows(&block.active_positions)
                .select_columns(&locals);
            let w = &block.a_inv * s_at;
            for &i in &comp.rows {
                let row = self.active_row(i, b);
                for (k, &(_, tc)) in term_locals.iter().enumerate() {
                    let mut acc = 0.0;
                    for &(a, z) in &row {
                        acc += z * w[(a, k)];
                    }
                    out[(i, tc)] -= acc;
                }
            }
        }
        out / self.lambda
    }
}

/// [`CovarianceSystem`] together with the fixed-effect design: GLS, `P`, and
/// the traces needed by the likelihood and POQUIM.
pub struct GlsSystem<'a> {
    cov: CovarianceSystem<'a>,
    /// `V⁻¹X`.
    vinv_x: DMatrix<f64>,
    h_chol: Cholesky<f64, Dyn>,
    h_inv: DMatrix<f64>,
    /// `Z'V⁻¹X`.
    zt_vinv_x: DMatrix<f64>,
}

impl<'a> GlsSystem<'a> {
    pub fn new(design: &'a Design, theta: &VarianceComponents) -> Result<Self> {
        let cov = CovarianceSystem::new(design, theta)?;
        let vinv_x = cov.solve_matrix(design.x());
        let mut h = design.x().transpose() * &vinv_x;
        symmetrize(&mut h);
        let h_chol =
            Cholesky::new(h).ok_or_else(|| Error::Singular("X'V⁻¹X is numerically singular".into()))?;
        let h_inv = h_chol.inverse();
        let zt_vinv_x = cov.zt_solve(design.x());
        Ok(Self {
            cov,
            vinv_x,
            h_chol,
            h_inv,
            zt_vinv_x,
        })
    }

    pub fn covariance(&self) -> &CovarianceSystem<'a> {
        &self.cov
    }

    pub fn design(&self) -> &'a Design {
        self.cov.design
    }

    pub fn lambda(&self) -> f64 {
        self.cov.lambda
    }

    pub fn log_det_v(&self) -> f64 {
        self.cov.logdet
    }

    /// `log|X'V⁻¹X|`.
    pub fn log_det_h(&self) -> f64 {
        2.0 * self.h_chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `X'V⁻¹X`.
    pub fn information_beta(&self) -> DMatrix<f64> {
        let mut h = self.design().x().transpose() * &self.vinv_x;
        symmetrize(&mut h);
        h
    }

    pub fn vinv_x(&self) -> &DMatrix<f64> {
        &self.vinv_x
    }

    pub fn h_inv(&self) -> &DMatrix<f64> {
        &self.h_inv
    }

    pub fn zt_vinv_x(&self) -> &DMatrix<f64> {
        &self.zt_vinv_x
    }

    pub fn gls_beta(&self, y: &DVector<f64>) -> DVector<f64> {
        self.h_chol.solve(&(self.vinv_x.transpose() * y))
    }

    /// `P v = V⁻¹v − V⁻¹X(X'V⁻¹X)⁻¹X'V⁻¹v`.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        let vinv_v = self.cov.solve(v);
        let coef = self.h_chol.solve(&(self.vinv_x.transpose() * v));
        vinv_v - &self.vinv_x * coef
    }

    /// Entry `(i, j)` of `P`.
    pub fn projection_entry(&self, i: usize, j: usize) -> f64 {
        let fi = self.vinv_x.row(i);
        let fj = self.vinv_x.row(j);
        self.cov.inverse_entry(i, j) - (fi * &self.h_inv * fj.transpose())[(0, 0)]
    }

    /// `Z'PZ` over all random columns.
    pub fn zt_project_z(&self) -> DMatrix<f64> {
        let mut k = self.cov.zt_solve_z();
        k -= &self.zt_vinv_x * &self.h_inv * self.zt_vinv_x.transpose();
        symmetrize(&mut k);
        k
    }

    /// `P Z_t` as a dense `N × m_t` matrix.
    pub fn project_term(&self, t: usize) -> DMatrix<f64> {
        let cols = self.design().term_columns(t);
        let g_t = self.zt_vinv_x.rows(cols.start, cols.len());
        self.cov.solve_term(t) - &self.vinv_x * &self.h_inv * g_t.transpose()
    }
}
