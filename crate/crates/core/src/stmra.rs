//! Multi-resolution approximation of a separable space-time Gaussian process.
//!
//! The domain is split by a quadtree into `J^m` rectangles at level `m`, each
//! carrying `r` knots on an inset grid. Basis functions follow the usual
//! recursion: `v_0` is the spatial correlation, `b_{m,j}(s) = v_m(s, S_{m,j})`,
//! `K_{m,j}^{-1} = v_m(S_{m,j}, S_{m,j})` and `v_{m+1}` is the remainder
//! `v_m - b'Kb` inside a level-`m+1` region and zero across regions.
//!
//! The basis is built from the unit-variance correlation, and the weight
//! covariance blocks carry the marginal variance: `K_{m,j} = sigma2 * Kt_{m,j}`.
//! The weights evolve as a stationary AR(1) over time with those blocks as
//! marginal covariance.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::geometry::{Point, QuadratureSet, Rect};
use crate::io::{self, ColumnHeader};
use crate::special::bessel_k_scaled;

pub const DEFAULT_JITTER: f64 = 1e-8;
pub const MAX_JITTER: f64 = 1e-4;

/// Support used when sampling the smoothness.
pub const NU_RANGE: (f64, f64) = (0.05, 1.95);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternParams {
    pub sigma2: f64,
    pub phi: f64,
    pub nu: f64,
}

impl MaternParams {
    pub fn new(sigma2: f64, phi: f64, nu: f64) -> Result<Self> {
        let p = Self { sigma2, phi, nu };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::Domain(format!("sigma2 = {} must be positive", self.sigma2)));
        }
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            return Err(Error::Domain(format!("phi = {} must be positive", self.phi)));
        }
        if !(self.nu > 0.0 && self.nu < 2.0) {
            return Err(Error::Domain(format!("nu = {} must lie in (0, 2)", self.nu)));
        }
        Ok(())
    }
}

/// Unit-variance Matérn correlation with the normalising constant cached.
#[derive(Debug, Clone, Copy)]
pub struct MaternKernel {
    phi: f64,
    nu: f64,
    ln_norm: f64,
}

impl MaternKernel {
    pub fn new(phi: f64, nu: f64) -> Self {
        Self {
            phi,
            nu,
            ln_norm: (nu - 1.0) * std::f64::consts::LN_2 + ln_gamma(nu),
        }
    }

    pub fn corr(&self, h: f64) -> f64 {
        if h <= 0.0 {
            return 1.0;
        }
        let x = h / self.phi;
        if x > 1e3 {
            return 0.0;
        }
        let v = (self.nu * x.ln() - x - self.ln_norm).exp() * bessel_k_scaled(self.nu, x);
        v.min(1.0)
    }
}

impl MaternKernel {
    /// Correlation and its derivative with respect to `ln h`, for `h > 0`.
    fn corr_and_log_slope(&self, h: f64) -> (f64, f64) {
        let x = h / self.phi;
        let scale = (self.nu * x.ln() - x - self.ln_norm).exp();
        // d/dx x^nu K_nu(x) = -x^nu K_{nu-1}(x), and K_{-a} = K_a
        let value = scale * bessel_k_scaled(self.nu, x);
        let slope = -scale * x * bessel_k_scaled((self.nu - 1.0).abs(), x);
        (value.min(1.0), slope)
    }
}

/// Cubic Hermite table of a kernel's correlation over log distance.
#[derive(Debug, Clone)]
struct LogCorrTable {
    ln_h0: f64,
    step: f64,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl LogCorrTable {
    const STEP: f64 = 0.01;

    fn new(kernel: &MaternKernel, ln_lo: f64, ln_hi: f64) -> Self {
        let n = (((ln_hi - ln_lo) / Self::STEP).ceil() as usize).max(1) + 1;
        let step = (ln_hi - ln_lo).max(Self::STEP) / (n - 1) as f64;
        let (values, slopes) = (0..n).map(|i| kernel.corr_and_log_slope((ln_lo + step * i as f64).exp())).unzip();
        Self {
            ln_h0: ln_lo,
            step,
            values,
            slopes,
        }
    }

    fn at(&self, ln_h: f64) -> f64 {
        let u = ((ln_h - self.ln_h0) / self.step).max(0.0);
        let i = (u as usize).min(self.values.len() - 2);
        let t = u - i as f64;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = 3.0 * t2 - 2.0 * t3;
        let h11 = t3 - t2;
        h00 * self.values[i] + h10 * self.step * self.slopes[i] + h01 * self.values[i + 1] + h11 * self.step * self.slopes[i + 1]
    }
}

pub fn matern_cov(h: f64, p: &MaternParams) -> Result<f64> {
    if !h.is_finite() || h < 0.0 {
        return Err(Error::Domain(format!("distance {h} must be finite and nonnegative")));
    }
    p.validate()?;
    Ok(p.sigma2 * MaternKernel::new(p.phi, p.nu).corr(h))
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KnotPlacement {
    /// Regular grid inset by half a grid cell from the partition boundary.
    #[default]
    Grid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub rect: Rect,
    pub knots: Vec<Point>,
    pub parent: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnotTree {
    pub domain: Rect,
    /// Number of levels beyond the root.
    pub max_level: usize,
    pub branching: usize,
    pub r: usize,
    pub partitions: Vec<Vec<Partition>>,
    side: usize,
}

fn perfect_sqrt(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

pub fn build_knot_tree(domain: Rect, max_level: usize, branching: usize, r: usize, placement: KnotPlacement) -> Result<KnotTree> {
    if !(domain.width() > 0.0 && domain.height() > 0.0) {
        return Err(Error::InvalidInput("empty domain".into()));
    }
    if max_level > 6 {
        return Err(Error::InvalidInput(format!("M = {max_level} is too deep (max 6)")));
    }
    let side = perfect_sqrt(branching)
        .filter(|&s| s >= 2)
        .ok_or_else(|| Error::InvalidInput(format!("J = {branching} must be a perfect square >= 4")))?;
    let KnotPlacement::Grid = placement;
    let g = perfect_sqrt(r)
        .filter(|&g| g >= 1 && r <= 400)
        .ok_or_else(|| Error::InvalidInput(format!("r = {r} must be a perfect square in 1..=400")))?;

    let mut partitions = Vec::with_capacity(max_level + 1);
    for m in 0..=max_level {
        let n = side.pow(m as u32);
        let (w, h) = (domain.width() / n as f64, domain.height() / n as f64);
        let mut level = Vec::with_capacity(n * n);
        for row in 0..n {
            for col in 0..n {
                let rect = Rect::new(
                    domain.x0 + col as f64 * w,
                    domain.y0 + row as f64 * h,
                    domain.x0 + (col + 1) as f64 * w,
                    domain.y0 + (row + 1) as f64 * h,
                );
                let knots = (0..g)
                    .flat_map(|i| {
                        (0..g).map(move |k| {
                            [
                                rect.x0 + (k as f64 + 0.5) * rect.width() / g as f64,
                                rect.y0 + (i as f64 + 0.5) * rect.height() / g as f64,
                            ]
                        })
                    })
                    .collect();
                let parent = (m > 0).then(|| (row / side) * (n / side) + col / side);
                level.push(Partition { rect, knots, parent });
            }
        }
        partitions.push(level);
    }
    Ok(KnotTree {
        domain,
        max_level,
        branching,
        r,
        partitions,
        side,
    })
}

impl KnotTree {
    pub fn n_partitions(&self) -> usize {
        self.partitions.iter().map(Vec::len).sum()
    }

    pub fn n_basis(&self) -> usize {
        self.n_partitions() * self.r
    }

    /// First column of partition `(m, j)` in the stacked basis.
    pub fn col_offset(&self, m: usize, j: usize) -> usize {
        self.r * (self.partitions[..m].iter().map(Vec::len).sum::<usize>() + j)
    }

    /// Partition index containing `s` at every level, root first. Upper
    /// domain edges belong to the last row and column.
    pub fn locate(&self, s: Point) -> Result<Vec<usize>> {
        if !self.domain.contains(s) || !s[0].is_finite() || !s[1].is_finite() {
            return Err(Error::Domain(format!("point ({}, {}) outside the domain", s[0], s[1])));
        }
        let fx = (s[0] - self.domain.x0) / self.domain.width();
        let fy = (s[1] - self.domain.y0) / self.domain.height();
        Ok((0..=self.max_level)
            .map(|m| {
                let n = self.side.pow(m as u32);
                let col = ((fx * n as f64) as usize).min(n - 1);
                let row = ((fy * n as f64) as usize).min(n - 1);
                row * n + col
            })
            .collect())
    }

    /// Ancestor indices of `(m, j)` for levels `0..=m`.
    pub fn ancestry(&self, m: usize, j: usize) -> Vec<usize> {
        let mut path = vec![0; m + 1];
        path[m] = j;
        for k in (0..m).rev() {
            path[k] = self.partitions[k + 1][path[k + 1]].parent.unwrap_or(0);
        }
        path
    }
}

#[derive(Debug, Clone)]
struct Block {
    /// Unit-variance weight covariance `Kt`.
    k: DMatrix<f64>,
    /// Unit-variance precision `Kt^{-1}` and its lower Cholesky factor.
    prec: DMatrix<f64>,
    prec_l: DMatrix<f64>,
    /// `b_k(S) Kt_k` for every coarser level `k`, rows indexed by this block's knots.
    cross: Vec<DMatrix<f64>>,
    jitter: f64,
}

/// Basis functions and weight covariances for one set of Matérn parameters.
#[derive(Debug, Clone)]
pub struct BasisSystem {
    pub tree: KnotTree,
    pub params: MaternParams,
    kernel: MaternKernel,
    blocks: Vec<Vec<Block>>,
}

fn chol_with_jitter(v: &DMatrix<f64>, jitter: f64, name: impl Fn() -> String) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut eps = jitter.max(0.0);
    loop {
        let mut a = v.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += eps;
        }
        if let Some(c) = Cholesky::new(a) {
            return Ok((c, eps));
        }
        eps = if eps == 0.0 { DEFAULT_JITTER } else { eps * 10.0 };
        if eps > MAX_JITTER * (1.0 + 1e-9) {
            return Err(Error::NotPositiveDefinite { block: name() });
        }
    }
}

/// Evaluate `b_k(s)` for `k = 0..levels.len()` given the path of `s`;
/// `corr(m, i)` is the correlation between `s` and knot `i` of its level-`m` region.
fn eval_path_with(tree: &KnotTree, levels: &[Vec<Block>], path: &[usize], mut corr: impl FnMut(usize, usize) -> f64) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(levels.len());
    for (m, level) in levels.iter().enumerate() {
        let j = path[m];
        let r = tree.partitions[m][j].knots.len();
        let mut b = DVector::from_fn(r, |i, _| corr(m, i));
        for (k, w) in level[j].cross.iter().enumerate() {
            b.gemv(-1.0, w, &out[k], 1.0);
        }
        out.push(b);
    }
    out
}

fn eval_path(kernel: &MaternKernel, tree: &KnotTree, levels: &[Vec<Block>], path: &[usize], s: Point) -> Vec<DVector<f64>> {
    eval_path_with(tree, levels, path, |m, i| kernel.corr(dist(s, tree.partitions[m][path[m]].knots[i])))
}

impl BasisSystem {
    pub fn build(tree: &KnotTree, params: MaternParams, jitter: f64) -> Result<Self> {
        params.validate()?;
        let kernel = MaternKernel::new(params.phi, params.nu);
        let mut blocks: Vec<Vec<Block>> = Vec::with_capacity(tree.max_level + 1);
        for m in 0..=tree.max_level {
            let level: Vec<Block> = (0..tree.partitions[m].len())
                .into_par_iter()
                .map(|j| {
                    let knots = &tree.partitions[m][j].knots;
                    let path = tree.ancestry(m, j);
                    let r = knots.len();
                    let mut v = DMatrix::from_fn(r, r, |a, b| kernel.corr(dist(knots[a], knots[b])));
                    let mut cross = Vec::with_capacity(m);
                    if m > 0 {
                        // rows: knots of this block; one matrix per coarser level
                        let evals: Vec<Vec<DVector<f64>>> =
                            knots.iter().map(|&q| eval_path(&kernel, tree, &blocks, &path, q)).collect();
                        for k in 0..m {
                            let bk = DMatrix::from_fn(r, tree.r, |a, c| evals[a][k][c]);
                            let w = &bk * &blocks[k][path[k]].k;
                            v -= &w * bk.transpose();
                            cross.push(w);
                        }
                        v = (&v + v.transpose()) * 0.5;
                    }
                    let (chol, used) = chol_with_jitter(&v, jitter, || format!("m={m},j={j}"))?;
                    let k = chol.inverse();
                    let k = (&k + k.transpose()) * 0.5;
                    let prec_l = chol.l();
                    Ok(Block {
                        k,
                        prec: &prec_l * prec_l.transpose(),
                        prec_l,
                        cross,
                        jitter: used,
                    })
                })
                .collect::<Result<_>>()?;
            blocks.push(level);
        }
        Ok(Self {
            tree: tree.clone(),
            params,
            kernel,
            blocks,
        })
    }

    pub fn n_basis(&self) -> usize {
        self.tree.n_basis()
    }

    /// Flattened `(m, j)` list in column order.
    pub fn block_ids(&self) -> Vec<(usize, usize)> {
        (0..=self.tree.max_level)
            .flat_map(|m| (0..self.tree.partitions[m].len()).map(move |j| (m, j)))
            .collect()
    }

    /// Weight covariance block `K_{m,j} = sigma2 * Kt_{m,j}`.
    pub fn k_block(&self, m: usize, j: usize) -> DMatrix<f64> {
        &self.blocks[m][j].k * self.params.sigma2
    }

    /// Unit-variance covariance block.
    pub fn k_unit(&self, m: usize, j: usize) -> &DMatrix<f64> {
        &self.blocks[m][j].k
    }

    /// Unit-variance precision block.
    pub fn prec_unit(&self, m: usize, j: usize) -> &DMatrix<f64> {
        &self.blocks[m][j].prec
    }

    /// Lower Cholesky factor of the unit-variance precision block.
    pub fn prec_unit_chol(&self, m: usize, j: usize) -> &DMatrix<f64> {
        &self.blocks[m][j].prec_l
    }

    /// Largest jitter any block needed.
    pub fn max_jitter(&self) -> f64 {
        self.blocks.iter().flatten().map(|b| b.jitter).fold(0.0, f64::max)
    }

    /// Nonzero basis values at `s` as `(column, value)`; `(M+1) r` entries.
    pub fn point_basis(&self, s: Point) -> Result<Vec<(usize, f64)>> {
        let path = self.tree.locate(s)?;
        Ok(self.point_basis_on_path(&path, s))
    }

    fn point_basis_on_path(&self, path: &[usize], s: Point) -> Vec<(usize, f64)> {
        let vals = eval_path(&self.kernel, &self.tree, &self.blocks, path, s);
        vals.iter()
            .enumerate()
            .flat_map(|(m, b)| {
                let off = self.tree.col_offset(m, path[m]);
                b.iter().enumerate().map(move |(i, &x)| (off + i, x))
            })
            .collect()
    }

    /// Implied spatial covariance `sum_m b_m(s1)' K_m b_m(s2)` over shared regions.
    pub fn implied_cov(&self, s1: Point, s2: Point) -> Result<f64> {
        let p1 = self.tree.locate(s1)?;
        let p2 = self.tree.locate(s2)?;
        let b1 = eval_path(&self.kernel, &self.tree, &self.blocks, &p1, s1);
        let b2 = eval_path(&self.kernel, &self.tree, &self.blocks, &p2, s2);
        let mut total = 0.0;
        for m in 0..=self.tree.max_level {
            if p1[m] != p2[m] {
                break;
            }
            total += (&self.blocks[m][p1[m]].k * &b2[m]).dot(&b1[m]);
        }
        Ok(self.params.sigma2 * total)
    }

    /// Quadrature-averaged basis rows, one per set, with exact kernel evaluations.
    pub fn areal_basis(&self, quads: &[QuadratureSet]) -> Result<ArealBasis> {
        let rows = quads
            .iter()
            .map(|q| {
                let mut acc = vec![0.0; self.n_basis()];
                for (&p, &w) in q.points.iter().zip(&q.weights) {
                    for (c, v) in self.point_basis(p)? {
                        acc[c] += w * v;
                    }
                }
                Ok(sparse_row(&acc))
            })
            .collect::<Result<_>>()?;
        Ok(ArealBasis {
            n_cols: self.n_basis(),
            rows,
        })
    }
}

pub fn build_basis(tree: &KnotTree, params: MaternParams, jitter: f64) -> Result<BasisSystem> {
    BasisSystem::build(tree, params, jitter)
}

/// Sparse areal basis matrix; each row lists `(column, value)` in increasing
/// column order.
#[derive(Debug, Clone, PartialEq)]
pub struct ArealBasis {
    pub n_cols: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl ArealBasis {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.rows.len(), self.n_cols);
        for (i, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                d[(i, c)] = v;
            }
        }
        d
    }

    pub fn from_dense(d: &DMatrix<f64>) -> Self {
        let rows = (0..d.nrows())
            .map(|i| (0..d.ncols()).filter(|&c| d[(i, c)] != 0.0).map(|c| (c, d[(i, c)])).collect())
            .collect();
        Self { n_cols: d.ncols(), rows }
    }

    pub fn row_dot(&self, i: usize, x: &DVector<f64>) -> f64 {
        self.rows[i].iter().map(|&(c, v)| v * x[c]).sum()
    }
}

fn sparse_row(acc: &[f64]) -> Vec<(usize, f64)> {
    acc.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(c, v)| (c, *v)).collect()
}

#[derive(Debug, Clone)]
struct DesignPoint {
    path: Vec<usize>,
    weight: f64,
    /// `ln` distance to each knot along the path, level by level; `-inf` on a knot.
    ln_dist: Vec<f64>,
}

/// Quadrature points with tree paths and knot distances resolved once, so
/// the areal basis can be re-evaluated cheaply for new covariance parameters.
/// Correlations come from a cubic Hermite table in log distance, which
/// agrees with direct evaluation to about 1e-10.
#[derive(Debug, Clone)]
pub struct ArealDesign {
    units: Vec<Vec<DesignPoint>>,
    n_cols: usize,
    ln_range: (f64, f64),
}

impl ArealDesign {
    pub fn new(tree: &KnotTree, quads: &[QuadratureSet]) -> Result<Self> {
        let mut ln_range = (f64::INFINITY, f64::NEG_INFINITY);
        let units = quads
            .iter()
            .map(|q| {
                q.points
                    .iter()
                    .zip(&q.weights)
                    .map(|(&p, &w)| {
                        let path = tree.locate(p)?;
                        let ln_dist: Vec<f64> = path
                            .iter()
                            .enumerate()
                            .flat_map(|(m, &j)| tree.partitions[m][j].knots.iter().map(move |&k| dist(p, k).ln()))
                            .collect();
                        for &d in ln_dist.iter().filter(|d| d.is_finite()) {
                            ln_range = (ln_range.0.min(d), ln_range.1.max(d));
                        }
                        Ok(DesignPoint { path, weight: w, ln_dist })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        if !ln_range.0.is_finite() {
            ln_range = (0.0, 0.0);
        }
        Ok(Self {
            units,
            n_cols: tree.n_basis(),
            ln_range,
        })
    }

    pub fn evaluate(&self, sys: &BasisSystem) -> ArealBasis {
        let table = LogCorrTable::new(&sys.kernel, self.ln_range.0, self.ln_range.1 + 1e-9);
        let r = sys.tree.r;
        let rows = self
            .units
            .par_iter()
            .map(|pts| {
                let mut acc = vec![0.0; self.n_cols];
                for pt in pts {
                    let vals = eval_path_with(&sys.tree, &sys.blocks, &pt.path, |m, i| {
                        let d = pt.ln_dist[m * r + i];
                        if d == f64::NEG_INFINITY {
                            1.0
                        } else {
                            table.at(d)
                        }
                    });
                    for (m, b) in vals.iter().enumerate() {
                        let off = sys.tree.col_offset(m, pt.path[m]);
                        for (i, v) in b.iter().enumerate() {
                            acc[off + i] += pt.weight * v;
                        }
                    }
                }
                sparse_row(&acc)
            })
            .collect();
        ArealBasis {
            n_cols: self.n_cols,
            rows,
        }
    }
}

/// Basis weights over `T` periods.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightChain {
    pub eta: Vec<DVector<f64>>,
    pub alpha: f64,
}

/// Draw `N_r(0, scale * Kt)` for one block from its precision factor.
pub fn sample_block<R: Rng + ?Sized>(prec_l: &DMatrix<f64>, scale: f64, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(prec_l.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let x = prec_l.tr_solve_lower_triangular(&z).expect("triangular factor is nonsingular");
    x * scale.sqrt()
}

pub fn sample_weights_prior<R: Rng + ?Sized>(sys: &BasisSystem, periods: usize, alpha: f64, rng: &mut R) -> Result<WeightChain> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    let n = sys.n_basis();
    let innov = 1.0 - alpha * alpha;
    let mut eta: Vec<DVector<f64>> = Vec::with_capacity(periods);
    for t in 0..periods {
        let mut cur = DVector::zeros(n);
        for (m, j) in sys.block_ids() {
            let off = sys.tree.col_offset(m, j);
            let l = sys.prec_unit_chol(m, j);
            let scale = if t == 0 { sys.params.sigma2 } else { sys.params.sigma2 * innov };
            let noise = sample_block(l, scale, rng);
            for i in 0..sys.tree.r {
                let prev = if t == 0 { 0.0 } else { alpha * eta[t - 1][off + i] };
                cur[off + i] = prev + noise[i];
            }
        }
        eta.push(cur);
    }
    Ok(WeightChain { eta, alpha })
}

/// `w_t(s) = sum_m b_m(s)' eta_{t,m}` with `t` counted from 1.
pub fn eval_field(sys: &BasisSystem, chain: &WeightChain, s: Point, t: usize) -> Result<f64> {
    if t == 0 || t > chain.eta.len() {
        return Err(Error::InvalidInput(format!("period {t} outside 1..={}", chain.eta.len())));
    }
    let eta = &chain.eta[t - 1];
    Ok(sys.point_basis(s)?.into_iter().map(|(c, v)| v * eta[c]).sum())
}

/// Identity of a cached areal basis matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisCacheKey {
    pub domain: [f64; 4],
    pub max_level: usize,
    pub branching: usize,
    pub r: usize,
    pub seed: u64,
    pub params: MaternParams,
    pub q: usize,
}

impl BasisCacheKey {
    pub fn fingerprint(&self) -> String {
        io::fingerprint(&serde_json::to_vec(self).expect("key serialises"))
    }
}

pub fn save_basis_cache(path: &Path, key: &BasisCacheKey, b: &ArealBasis) -> Result<()> {
    let dense = b.to_dense();
    let header = ColumnHeader {
        columns: (0..b.n_cols).map(|c| format!("b{c}")).collect(),
        rows: b.n_rows(),
        fingerprint: key.fingerprint(),
        meta: serde_json::to_value(key)?,
    };
    let cols: Vec<Vec<f64>> = (0..b.n_cols).map(|c| dense.column(c).iter().copied().collect()).collect();
    io::write_columns(path, &header, &cols)
}

/// Cached matrix for `key`, or `None` when absent or built for another key.
pub fn load_basis_cache(path: &Path, key: &BasisCacheKey) -> Result<Option<ArealBasis>> {
    if !path.exists() {
        return Ok(None);
    }
    let (header, cols) = io::read_columns(path)?;
    if header.fingerprint != key.fingerprint() {
        return Ok(None);
    }
    let dense = DMatrix::from_fn(header.rows, cols.len(), |i, c| cols[c][i]);
    Ok(Some(ArealBasis::from_dense(&dense)))
}
