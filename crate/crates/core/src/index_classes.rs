//! Index classes of the moment-coefficient maps.
//!
//! For a quadruple of observation indices the coefficient vector has entries
//! `Σ_l z_{i₁tl} z_{i₂tl} z_{i₃tl} z_{i₄tl}` for each random term `t`, with the
//! error entry equal to 1 exactly when all four indices coincide. Triples use
//! the third-order products. Tuples with equal coefficient vectors form a
//! class; the all-zero vector is excluded.
//!
//! A tuple has a nonzero key only if all of its indices lie in the support of
//! a common random-effect column, or all indices are equal. Enumeration
//! therefore runs over multisets drawn from each column support (and from the
//! singletons of rows with no random loading). A multiset is kept by the
//! lowest-numbered group that contains all of its indices, so each unordered
//! member is stored once together with its permutation multiplicity.

use std::collections::HashMap;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::likelihood::{MlScoreParts, RemlScoreParts};
use crate::model::Design;

/// Default cap on `Σ_groups |group|^order`.
pub const DEFAULT_BUDGET: u128 = 1_000_000_000;

const MANTISSA_BITS: i32 = 30;

/// Coefficient vector of a class, `(s+1)` entries with the error term first.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassKey {
    pub coeff: Vec<f64>,
}

impl ClassKey {
    pub fn is_zero(&self) -> bool {
        self.coeff.iter().all(|&c| c == 0.0)
    }

    /// Comparison key: exact for integers up to 2³⁰, relative precision
    /// about 1e−9 otherwise.
    pub fn quantized(&self) -> Vec<i64> {
        let mut out = Vec::with_capacity(2 * self.coeff.len());
        for &c in &self.coeff {
            let (e, m) = quantize(c);
            out.push(e);
            out.push(m);
        }
        out
    }
}

fn quantize(v: f64) -> (i64, i64) {
    if v == 0.0 {
        return (0, 0);
    }
    let mut e = v.abs().log2().floor() as i32 + 1;
    let mut f = v / 2f64.powi(e);
    while f.abs() >= 1.0 {
        f /= 2.0;
        e += 1;
    }
    while f.abs() < 0.5 {
        f *= 2.0;
        e -= 1;
    }
    let scale = (1i64 << MANTISSA_BITS) as f64;
    let mut m = (f * scale).round() as i64;
    if m.abs() == 1i64 << MANTISSA_BITS {
        m /= 2;
        e += 1;
    }
    (e as i64, m)
}

#[derive(Clone, Debug)]
pub struct IndexClass {
    pub key: ClassKey,
    /// Number of ordered tuples in the class.
    pub cardinality: u64,
}

#[derive(Clone, Copy, Debug)]
struct Member {
    idx: [u16; 4],
    class: u32,
}

/// Rows of one enumeration group and the unordered members it owns.
#[derive(Clone, Debug)]
struct MemberGroup {
    rows: Vec<usize>,
    members: Vec<Member>,
}

/// One stored unordered member, in global indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassMember {
    /// Ascending indices; only the first `order` entries are meaningful.
    pub indices: [usize; 4],
    pub class: usize,
    /// Number of distinct ordered tuples with these indices.
    pub multiplicity: u32,
}

/// Partition of the ordered tuples with nonzero key into classes.
#[derive(Clone, Debug)]
pub struct IndexClassPartition {
    order: usize,
    classes: Vec<IndexClass>,
    groups: Vec<MemberGroup>,
    term_names: Vec<String>,
}

impl IndexClassPartition {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn classes(&self) -> &[IndexClass] {
        &self.classes
    }

    /// `L` for quadruples, `K` for triples.
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn cardinalities(&self) -> Vec<u64> {
        self.classes.iter().map(|c| c.cardinality).collect()
    }

    pub fn total_cardinality(&self) -> u64 {
        self.classes.iter().map(|c| c.cardinality).sum()
    }

    pub fn n_members(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).sum()
    }

    pub fn members(&self) -> impl Iterator<Item = ClassMember> + '_ {
        let order = self.order;
        self.groups.iter().flat_map(move |g| {
            g.members.iter().map(move |m| {
                let mut indices = [0usize; 4];
                for (a, &k) in m.idx[..order].iter().enumerate() {
                    indices[a] = g.rows[k as usize];
                }
                ClassMember {
                    indices,
                    class: m.class as usize,
                    multiplicity: multiplicity(&m.idx[..order]),
                }
            })
        })
    }

    /// Tab-separated dump: class index, ordered cardinality and the key.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "class\tcardinality\terror")?;
        for name in &self.term_names {
            write!(out, "\t{name}")?;
        }
        writeln!(out)?;
        for (l, class) in self.classes.iter().enumerate() {
            write!(out, "{}\t{}", l + 1, class.cardinality)?;
            for c in &class.key.coeff {
                write!(out, "\t{c}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Ordered arrangements of a sorted multiset: `order! / Π (run length)!`.
fn multiplicity(sorted: &[u16]) -> u32 {
    let factorial = [1u32, 1, 2, 6, 24];
    let mut denom = 1;
    let mut run = 1;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            denom *= factorial[run];
            run = 1;
        }
    }
    denom *= factorial[run];
    factorial[sorted.len()] / denom
}

pub fn classify_quadruples(design: &Design) -> Result<IndexClassPartition> {
    classify(design, 4, DEFAULT_BUDGET)
}

pub fn classify_triples(design: &Design) -> Result<IndexClassPartition> {
    classify(design, 3, DEFAULT_BUDGET)
}

/// [`classify_quadruples`] or [`classify_triples`] with an explicit budget.
pub fn classify_with_budget(design: &Design, order: usize, budget: u128) -> Result<IndexClassPartition> {
    if !(order == 3 || order == 4) {
        return Err(Error::InvalidModel(format!("tuple order must be 3 or 4, got {order}")));
    }
    classify(design, order, budget)
}

fn classify(design: &Design, order: usize, budget: u128) -> Result<IndexClassPartition> {
    let n = design.n_obs();
    let n_cols = design.n_random_columns();
    let s = design.n_terms();

    let mut group_rows: Vec<Vec<usize>> = (0..n_cols)
        .map(|c| {
            let mut rows: Vec<usize> = design.column_support(c).iter().map(|&(i, _)| i).collect();
            rows.sort_unstable();
            rows
        })
        .collect();
    group_rows.extend((0..n).map(|i| vec![i]));

    let required: u128 = group_rows
        .iter()
        .map(|g| (g.len() as u128).pow(order as u32))
        .sum();
    if required > budget {
        return Err(Error::BudgetExceeded { required, budget });
    }
    if let Some(g) = group_rows.iter().find(|g| g.len() > u16::MAX as usize) {
        return Err(Error::BudgetExceeded {
            required: g.len() as u128,
            budget: u16::MAX as u128,
        });
    }

    let mut lookup: HashMap<Vec<i64>, u32> = HashMap::new();
    let mut classes: Vec<IndexClass> = Vec::new();
    let mut groups = Vec::with_capacity(group_rows.len());
    let mut coeff = vec![0.0; s + 1];
    let mut qkey: Vec<i64> = Vec::with_capacity(2 * (s + 1));
    let mut distinct = Vec::with_capacity(4);

    for (gid, rows) in group_rows.into_iter().enumerate() {
        let k = rows.len();
        let mut members = Vec::new();
        let mut idx = [0u16; 4];
        let mut visit = |local: &[u16]| {
            distinct.clear();
            for &a in local {
                let r = rows[a as usize];
                if distinct.last() != Some(&r) {
                    distinct.push(r);
                }
            }
            if !owned(design, gid, n_cols, &distinct) {
                return;
            }
            coefficients(design, &rows, local, &mut coeff);
            if coeff.iter().all(|&c| c == 0.0) {
                return;
            }
            qkey.clear();
            for &c in coeff.iter() {
                let (e, m) = quantize(c);
                qkey.push(e);
                qkey.push(m);
            }
            let class = match lookup.get(&qkey) {
                Some(&id) => id,
                None => {
                    let id = classes.len() as u32;
                    lookup.insert(qkey.clone(), id);
                    classes.push(IndexClass {
                        key: ClassKey { coeff: coeff.clone() },
                        cardinality: 0,
                    });
                    id
                }
            };
            classes[class as usize].cardinality += multiplicity(local) as u64;
            let mut stored = [0u16; 4];
            stored[..local.len()].copy_from_slice(local);
            members.push(Member { idx: stored, class });
        };
        if order == 4 {
            for a in 0..k {
                for b in a..k {
                    for c in b..k {
                        for d in c..k {
                            idx = [a as u16, b as u16, c as u16, d as u16];
                            visit(&idx);
                        }
                    }
                }
            }
        } else {
            for a in 0..k {
                for b in a..k {
                    for c in b..k {
                        idx[..3].copy_from_slice(&[a as u16, b as u16, c as u16]);
                        visit(&idx[..3]);
                    }
                }
            }
        }
        if !members.is_empty() {
            groups.push(MemberGroup { rows, members });
        }
    }

    // canonical order: classes without the error term first, then by term
    // coefficients from the first term on, larger first
    let mut perm: Vec<usize> = (0..classes.len()).collect();
    perm.sort_by(|&a, &b| {
        let (ka, kb) = (&classes[a].key.coeff, &classes[b].key.coeff);
        ka[0].total_cmp(&kb[0]).then_with(|| {
            kb[1..]
                .iter()
                .zip(&ka[1..])
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let mut rank = vec![0u32; classes.len()];
    for (new, &old) in perm.iter().enumerate() {
        rank[old] = new as u32;
    }
    let classes: Vec<IndexClass> = perm.iter().map(|&old| classes[old].clone()).collect();
    for g in &mut groups {
        for m in &mut g.members {
            m.class = rank[m.class as usize];
        }
    }

    Ok(IndexClassPartition {
        order,
        classes,
        groups,
        term_names: design.terms().iter().map(|t| t.name.clone()).collect(),
    })
}

/// True when no group with a smaller id than `gid` holds all `rows`.
fn owned(design: &Design, gid: usize, n_cols: usize, rows: &[usize]) -> bool {
    let first = design.row_nonzeros(rows[0]);
    if rows.len() == 1 {
        return match first.first() {
            Some(&(c, _)) => c == gid,
            None => gid == n_cols + rows[0],
        };
    }
    for &(c, _) in first {
        if c >= gid {
            break;
        }
        if rows[1..]
            .iter()
            .all(|&r| design.row_nonzeros(r).binary_search_by_key(&c, |&(cc, _)| cc).is_ok())
        {
            return false;
        }
    }
    true
}

fn coefficients(design: &Design, rows: &[usize], local: &[u16], coeff: &mut [f64]) {
    coeff.iter_mut().for_each(|c| *c = 0.0);
    let r0 = rows[local[0] as usize];
    if local.iter().all(|&a| rows[a as usize] == r0) {
        coeff[0] = 1.0;
    }
    for &(c, z0) in design.row_nonzeros(r0) {
        let mut prod = z0;
        for &a in &local[1..] {
            let r = rows[a as usize];
            match design.row_nonzeros(r).binary_search_by_key(&c, |&(cc, _)| cc) {
                Ok(pos) => prod *= design.row_nonzeros(r)[pos].1,
                Err(_) => {
                    prod = 0.0;
                    break;
                }
            }
        }
        if prod != 0.0 {
            coeff[design.column_term(c) + 1] += prod;
        }
    }
}

/// Symmetric matrices `M_j` whose entries enter the class coefficients;
/// blocks are requested one enumeration group at a time.
pub trait QuadraticForms {
    /// Number of matrices `M_0, …`.
    fn n_forms(&self) -> usize;

    /// `M_j[rows, rows]`.
    fn block(&self, j: usize, rows: &[usize]) -> DMatrix<f64>;
}

fn dense_block(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows.len(), |a, b| m[(rows[a], rows[b])])
}

impl QuadraticForms for RemlScoreParts {
    fn n_forms(&self) -> usize {
        self.b.len()
    }

    fn block(&self, j: usize, rows: &[usize]) -> DMatrix<f64> {
        dense_block(&self.b[j], rows)
    }
}

impl QuadraticForms for MlScoreParts {
    fn n_forms(&self) -> usize {
        self.c.len()
    }

    fn block(&self, j: usize, rows: &[usize]) -> DMatrix<f64> {
        dense_block(&self.c[j], rows)
    }
}

impl QuadraticForms for [DMatrix<f64>] {
    fn n_forms(&self) -> usize {
        self.len()
    }

    fn block(&self, j: usize, rows: &[usize]) -> DMatrix<f64> {
        dense_block(&self[j], rows)
    }
}

/// Per-class sums over ordered quadruples, accumulated in one pass.
#[derive(Clone, Debug)]
pub(crate) struct QuadrupleSums {
    /// `(j, k)` pairs with `j ≤ k`.
    pub pairs: Vec<(usize, usize)>,
    /// `[class][pair]`: `Σ M_j(i₁,i₂) M_k(i₃,i₄)`.
    pub products: Vec<Vec<f64>>,
    /// `[class]`: `Σ u_{i₁}u_{i₂}u_{i₃}u_{i₄}`.
    pub residual: Vec<f64>,
    /// `[class]`: `Σ Γ(i₁,i₃)Γ(i₂,i₄)`.
    pub kernel: Vec<f64>,
}

impl QuadrupleSums {
    pub fn pair_index(&self, j: usize, k: usize) -> usize {
        let (a, b) = if j <= k { (j, k) } else { (k, j) };
        self.pairs.iter().position(|&p| p == (a, b)).expect("pair present")
    }
}

/// Local `Γ(a, b) = δ_ab + Σ_t γ_t z_a'z_b` over `rows`.
fn kernel_block(design: &Design, gamma: &[f64], rows: &[usize]) -> DMatrix<f64> {
    let k = rows.len();
    let mut g = DMatrix::identity(k, k);
    for a in 0..k {
        let ra = design.row_nonzeros(rows[a]);
        for b in a..k {
            let rb = design.row_nonzeros(rows[b]);
            let (mut x, mut y) = (0, 0);
            let mut acc = 0.0;
            while x < ra.len() && y < rb.len() {
                match ra[x].0.cmp(&rb[y].0) {
                    std::cmp::Ordering::Less => x += 1,
                    std::cmp::Ordering::Greater => y += 1,
                    std::cmp::Ordering::Equal => {
                        acc += gamma[design.column_term(ra[x].0)] * ra[x].1 * rb[y].1;
                        x += 1;
                        y += 1;
                    }
                }
            }
            g[(a, b)] += acc;
            if a != b {
                g[(b, a)] += acc;
            }
        }
    }
    g
}

/// The three ways of splitting four positions into two pairs.
const PAIRINGS: [[(usize, usize); 2]; 3] = [[(0, 1), (2, 3)], [(0, 2), (1, 3)], [(0, 3), (1, 2)]];

pub(crate) fn accumulate_quadruples(
    partition: &IndexClassPartition,
    forms: &(impl QuadraticForms + ?Sized),
    design: &Design,
    u: Option<&DVector<f64>>,
    gamma: Option<&[f64]>,
) -> QuadrupleSums {
    let nf = forms.n_forms();
    let pairs: Vec<(usize, usize)> = (0..nf).flat_map(|j| (j..nf).map(move |k| (j, k))).collect();
    let nl = partition.len();
    let mut products = vec![vec![0.0; pairs.len()]; nl];
    let mut residual = vec![0.0; nl];
    let mut kernel = vec![0.0; nl];
    let mut vals = vec![[0.0f64; 6]; nf];

    for group in &partition.groups {
        let k = group.rows.len();
        let blocks: Vec<DMatrix<f64>> = (0..nf).map(|j| forms.block(j, &group.rows)).collect();
        let u_local: Option<Vec<f64>> = u.map(|u| group.rows.iter().map(|&i| u[i]).collect());
        let g_local = gamma.map(|g| kernel_block(design, g, &group.rows));
        for m in &group.members {
            let x = [m.idx[0] as usize, m.idx[1] as usize, m.idx[2] as usize, m.idx[3] as usize];
            let mult = multiplicity(&m.idx) as f64;
            let l = m.class as usize;
            // column-major offsets of the six index pairs, in pairing order
            let mut off = [0usize; 6];
            for (p, pairing) in PAIRINGS.iter().enumerate() {
                off[2 * p] = x[pairing[0].0] + k * x[pairing[0].1];
                off[2 * p + 1] = x[pairing[1].0] + k * x[pairing[1].1];
            }
            for (j, block) in blocks.iter().enumerate() {
                let data = block.as_slice();
                for (v, &o) in vals[j].iter_mut().zip(&off) {
                    *v = data[o];
                }
            }
            let acc = &mut products[l];
            for (q, &(j, k)) in pairs.iter().enumerate() {
                let (vj, vk) = (&vals[j], &vals[k]);
                let sum = vj[0] * vk[1] + vj[1] * vk[0] + vj[2] * vk[3] + vj[3] * vk[2] + vj[4] * vk[5] + vj[5] * vk[4];
                acc[q] += mult / 6.0 * sum;
            }
            if let Some(ul) = &u_local {
                residual[l] += mult * ul[x[0]] * ul[x[1]] * ul[x[2]] * ul[x[3]];
            }
            if let Some(g) = &g_local {
                let g = g.as_slice();
                let sum = g[off[0]] * g[off[1]] + g[off[2]] * g[off[3]] + g[off[4]] * g[off[5]];
                kernel[l] += mult / 3.0 * sum;
            }
        }
    }

    QuadrupleSums {
        pairs,
        products,
        residual,
        kernel,
    }
}

/// Per-class sums over ordered triples.
#[derive(Clone, Debug)]
pub(crate) struct TripleSums {
    /// `[class][j * n_forms + k]`: `Σ q_j(i₁) M_k(i₂,i₃)`.
    pub products: Vec<Vec<f64>>,
    /// `[class]`: `Σ u_{i₁}u_{i₂}u_{i₃}`.
    pub residual: Vec<f64>,
}

pub(crate) fn accumulate_triples(
    partition: &IndexClassPartition,
    weights: &DMatrix<f64>,
    forms: &(impl QuadraticForms + ?Sized),
    u: Option<&DVector<f64>>,
) -> TripleSums {
    let nf = forms.n_forms();
    let p = weights.ncols();
    let nl = partition.len();
    let mut products = vec![vec![0.0; p * nf]; nl];
    let mut residual = vec![0.0; nl];
    for group in &partition.groups {
        let blocks: Vec<DMatrix<f64>> = (0..nf).map(|j| forms.block(j, &group.rows)).collect();
        for m in &group.members {
            let x = [m.idx[0] as usize, m.idx[1] as usize, m.idx[2] as usize];
            let rows = [group.rows[x[0]], group.rows[x[1]], group.rows[x[2]]];
            let mult = multiplicity(&m.idx[..3]) as f64;
            let l = m.class as usize;
            for j in 0..p {
                let q = [weights[(rows[0], j)], weights[(rows[1], j)], weights[(rows[2], j)]];
                for (k, block) in blocks.iter().enumerate() {
                    let sum = q[0] * block[(x[1], x[2])]
                        + q[1] * block[(x[0], x[2])]
                        + q[2] * block[(x[0], x[1])];
                    products[l][j * nf + k] += mult / 3.0 * sum;
                }
            }
            if let Some(u) = u {
                residual[l] += mult * u[rows[0]] * u[rows[1]] * u[rows[2]];
            }
        }
    }
    TripleSums { products, residual }
}

fn check_order(partition: &IndexClassPartition, order: usize) -> Result<()> {
    if partition.order != order {
        return Err(Error::InvalidModel(format!(
            "expected a partition of {order}-tuples, got {}-tuples",
            partition.order
        )));
    }
    Ok(())
}

fn check_forms(n_forms: usize, j: usize, k: usize) -> Result<()> {
    if j >= n_forms || k >= n_forms {
        return Err(Error::Dimension(format!(
            "form indices ({j}, {k}) out of range for {n_forms} forms"
        )));
    }
    Ok(())
}

/// Class means of `M_j(i₁,i₂) M_k(i₃,i₄)` over ordered quadruples.
fn quadruple_means(
    partition: &IndexClassPartition,
    forms: &(impl QuadraticForms + ?Sized),
    design: &Design,
    j: usize,
    k: usize,
) -> Result<Vec<f64>> {
    check_order(partition, 4)?;
    check_forms(forms.n_forms(), j, k)?;
    let sums = accumulate_quadruples(partition, forms, design, None, None);
    let q = sums.pair_index(j, k);
    Ok(partition
        .classes
        .iter()
        .zip(&sums.products)
        .map(|(c, p)| p[q] / c.cardinality as f64)
        .collect())
}

/// `c_{j,k,l}`: class mean of `B_{j,i₁,i₂} B_{k,i₃,i₄}`.
pub fn class_coefficients_reml(
    partition: &IndexClassPartition,
    parts: &(impl QuadraticForms + ?Sized),
    design: &Design,
    j: usize,
    k: usize,
) -> Result<Vec<f64>> {
    quadruple_means(partition, parts, design, j, k)
}

/// `(c₁_{j,k,l}, c₂_{j,k,l})`: class means of `q_{j,i₁} C_{k,i₂,i₃}` over
/// triples (`j` indexes fixed-effect columns, `k` variance components) and of
/// `C_{j,i₁,i₂} C_{k,i₃,i₄}` over quadruples (both `j, k` variance
/// components).
pub fn class_coefficients_ml(
    triples: &IndexClassPartition,
    quadruples: &IndexClassPartition,
    parts: &MlScoreParts,
    design: &Design,
    j: usize,
    k: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let c1 = class_coefficients_ml_triples(triples, parts, j, k)?;
    let c2 = quadruple_means(quadruples, parts, design, j, k)?;
    Ok((c1, c2))
}

/// `c₁_{j,k,l}` alone; `j` indexes fixed-effect columns.
pub fn class_coefficients_ml_triples(
    triples: &IndexClassPartition,
    parts: &MlScoreParts,
    j: usize,
    k: usize,
) -> Result<Vec<f64>> {
    check_order(triples, 3)?;
    check_forms(parts.c.len(), 0, k)?;
    if j >= parts.q.len() {
        return Err(Error::Dimension(format!(
            "fixed-effect column {j} out of range for {} columns",
            parts.q.len()
        )));
    }
    let weights = DMatrix::from_column_slice(parts.q[j].len(), 1, parts.q[j].as_slice());
    let sums = accumulate_triples(triples, &weights, parts, None);
    Ok(triples
        .classes
        .iter()
        .zip(&sums.products)
        .map(|(c, p)| p[k] / c.cardinality as f64)
        .collect())
}
