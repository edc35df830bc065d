//! Periodic structured grids, dense tensor fields and finite-difference stencils.
//!
//! Every field lives on a uniform grid over the flat torus `T^n`. Components of a
//! rank-`r` tensor are stored densely (`n^r` values per grid point) in row-major
//! index order, points are stored row-major over the grid (last axis fastest).
//! Derivative fields put the new derivative index in front of the existing ones.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use thiserror::Error;

/// Number of grid points summed per partial sum in deterministic reductions.
const REDUCTION_CHUNK: usize = 1024;

/// Relative floor on the smallest metric eigenvalue.
pub const EPS_SPD: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("grid dimension must be at least 4, got {0}")]
    DimensionTooSmall(usize),
    #[error("grid dimension above 8 is not supported, got {0}")]
    DimensionTooLarge(usize),
    #[error("grid has {sizes} axis sizes but {periods} periods")]
    AxisMismatch { sizes: usize, periods: usize },
    #[error("axis {axis}: size must be at least 1")]
    EmptyAxis { axis: usize },
    #[error("axis {axis}: period must be positive and finite, got {period}")]
    BadPeriod { axis: usize, period: f64 },
    #[error("metric is not positive definite at point {point} (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { point: usize, min_eigenvalue: f64 },
    #[error("expected a rank-{expected} field, got rank {found}")]
    RankMismatch { expected: usize, found: usize },
}

/// Uniform periodic grid of dimension `4 <= n <= 8`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    sizes: Vec<usize>,
    periods: Vec<f64>,
    spacing: Vec<f64>,
    strides: Vec<usize>,
    npoints: usize,
}

impl Grid {
    pub fn new(sizes: Vec<usize>, periods: Vec<f64>) -> Result<Arc<Self>, MeshError> {
        let dim = sizes.len();
        if dim < 4 {
            return Err(MeshError::DimensionTooSmall(dim));
        }
        if dim > 8 {
            return Err(MeshError::DimensionTooLarge(dim));
        }
        if periods.len() != dim {
            return Err(MeshError::AxisMismatch { sizes: dim, periods: periods.len() });
        }
        for (axis, (&n, &l)) in sizes.iter().zip(&periods).enumerate() {
            if n == 0 {
                return Err(MeshError::EmptyAxis { axis });
            }
            if !(l.is_finite() && l > 0.0) {
                return Err(MeshError::BadPeriod { axis, period: l });
            }
        }
        let spacing = sizes.iter().zip(&periods).map(|(&n, &l)| l / n as f64).collect();
        let mut strides = vec![1; dim];
        for a in (0..dim - 1).rev() {
            strides[a] = strides[a + 1] * sizes[a + 1];
        }
        let npoints = sizes.iter().product();
        Ok(Arc::new(Self { dim, sizes, periods, spacing, strides, npoints }))
    }

    /// Unit-period grid.
    pub fn unit(sizes: Vec<usize>) -> Result<Arc<Self>, MeshError> {
        let n = sizes.len();
        Self::new(sizes, vec![1.0; n])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn periods(&self) -> &[f64] {
        &self.periods
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn npoints(&self) -> usize {
        self.npoints
    }

    /// Axes with more than one grid point.
    pub fn active_axes(&self) -> Vec<usize> {
        (0..self.dim).filter(|&a| self.sizes[a] > 1).collect()
    }

    /// Smallest spacing over the active axes (or over all axes if none is active).
    pub fn h_min(&self) -> f64 {
        let active = self.active_axes();
        let axes: Vec<usize> = if active.is_empty() { (0..self.dim).collect() } else { active };
        axes.iter().map(|&a| self.spacing[a]).fold(f64::INFINITY, f64::min)
    }

    /// Volume element of one cell, `prod h_a`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Converts a plain sum over nodes into a midpoint-rule integral. Written as
    /// `sum / N * prod L` so that a constant integrand integrates exactly.
    pub fn quadrature(&self, node_sum: f64) -> f64 {
        node_sum / self.npoints as f64 * self.periods.iter().product::<f64>()
    }

    pub fn index_of(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn multi_index(&self, point: usize) -> Vec<usize> {
        (0..self.dim).map(|a| (point / self.strides[a]) % self.sizes[a]).collect()
    }

    /// Coordinates of a grid node, `x_a = i_a h_a`.
    pub fn coords(&self, point: usize) -> Vec<f64> {
        (0..self.dim)
            .map(|a| ((point / self.strides[a]) % self.sizes[a]) as f64 * self.spacing[a])
            .collect()
    }

    /// Index of the node `offset` cells away from `point` along `axis`, wrapping periodically.
    #[inline]
    pub fn neighbor(&self, point: usize, axis: usize, offset: isize) -> usize {
        let n = self.sizes[axis] as isize;
        let stride = self.strides[axis];
        let i = ((point / stride) % self.sizes[axis]) as isize;
        let j = (i + offset).rem_euclid(n);
        (point as isize + (j - i) * stride as isize) as usize
    }

    /// Same shape and periods.
    pub fn same_as(&self, other: &Grid) -> bool {
        self.sizes == other.sizes && self.periods == other.periods
    }
}

/// Accuracy order of the central first-derivative stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum StencilOrder {
    #[serde(rename = "2")]
    Second,
    #[default]
    #[serde(rename = "4")]
    Fourth,
}

impl StencilOrder {
    pub fn from_int(order: u32) -> Option<Self> {
        match order {
            2 => Some(Self::Second),
            4 => Some(Self::Fourth),
            _ => None,
        }
    }

    pub fn as_int(self) -> u32 {
        match self {
            Self::Second => 2,
            Self::Fourth => 4,
        }
    }
}

/// Antisymmetric central first-derivative stencil: `f'(x) ~ sum_k w_k (f(x+kh) - f(x-kh)) / h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    order: StencilOrder,
    weights: Vec<f64>,
}

impl Default for Stencil {
    fn default() -> Self {
        Self::central(StencilOrder::Fourth)
    }
}

impl Stencil {
    pub fn central(order: StencilOrder) -> Self {
        let weights = match order {
            StencilOrder::Second => vec![0.5],
            StencilOrder::Fourth => vec![2.0 / 3.0, -1.0 / 12.0],
        };
        Self { order, weights }
    }

    /// Debug hook: scales the nearest-neighbour weight by `1 + eps`, which makes the
    /// stencil inconsistent. Used only for fault-injection checks.
    pub fn corrupted(order: StencilOrder, eps: f64) -> Self {
        let mut s = Self::central(order);
        s.weights[0] *= 1.0 + eps;
        s
    }

    pub fn order(&self) -> StencilOrder {
        self.order
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Largest modulus of the stencil symbol over `theta in [0, pi]` (times `1/h`).
    pub fn symbol_max(&self) -> f64 {
        (0..=2000)
            .map(|i| self.symbol(std::f64::consts::PI * i as f64 / 2000.0).abs())
            .fold(0.0, f64::max)
    }

    /// `sum_k 2 w_k sin(k theta)`: the stencil's response to `exp(i theta j)` divided by `i/h`.
    pub fn symbol(&self, theta: f64) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(k, w)| 2.0 * w * ((k + 1) as f64 * theta).sin())
            .sum()
    }
}

/// Component symmetry declared for a tensor field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symmetry {
    None,
    /// Rank 2 and symmetric.
    Symmetric,
    /// Rank 4 with `T_ijkl = -T_jikl = -T_ijlk = T_klij`.
    RiemannType,
}

/// Rank-`(0,r)` tensor valued on a periodic grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    grid: Arc<Grid>,
    rank: usize,
    symmetry: Symmetry,
    data: Vec<f64>,
}

impl TensorField {
    pub fn zeros(grid: &Arc<Grid>, rank: usize, symmetry: Symmetry) -> Self {
        let ncomp = grid.dim().pow(rank as u32);
        Self { grid: grid.clone(), rank, symmetry, data: vec![0.0; ncomp * grid.npoints()] }
    }

    pub fn from_data(grid: &Arc<Grid>, rank: usize, symmetry: Symmetry, data: Vec<f64>) -> Self {
        let ncomp = grid.dim().pow(rank as u32);
        assert_eq!(data.len(), ncomp * grid.npoints(), "tensor data length does not match grid");
        Self { grid: grid.clone(), rank, symmetry, data }
    }

    /// Evaluates `f(coords, out)` at every node.
    pub fn from_fn<F>(grid: &Arc<Grid>, rank: usize, symmetry: Symmetry, f: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Sync,
    {
        let ncomp = grid.dim().pow(rank as u32);
        let data = par_map_points(grid.npoints(), ncomp, |p, out| f(&grid.coords(p), out));
        Self::from_data(grid, rank, symmetry, data)
    }

    pub fn scalar_from_fn<F>(grid: &Arc<Grid>, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        Self::from_fn(grid, 0, Symmetry::None, |x, out| out[0] = f(x))
    }

    pub fn constant_scalar(grid: &Arc<Grid>, value: f64) -> Self {
        Self::from_data(grid, 0, Symmetry::None, vec![value; grid.npoints()])
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn symmetry(&self) -> Symmetry {
        self.symmetry
    }

    pub fn ncomp(&self) -> usize {
        self.grid.dim().pow(self.rank as u32)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Components at one grid point.
    pub fn at(&self, point: usize) -> &[f64] {
        let nc = self.ncomp();
        &self.data[point * nc..(point + 1) * nc]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self + c * other`.
    pub fn axpy(&self, c: f64, other: &TensorField) -> TensorField {
        assert_eq!(self.rank, other.rank);
        let data = self.data.par_iter().zip(&other.data).map(|(a, b)| a + c * b).collect();
        TensorField { grid: self.grid.clone(), rank: self.rank, symmetry: self.symmetry, data }
    }

    pub fn scaled(&self, c: f64) -> TensorField {
        let data = self.data.par_iter().map(|a| c * a).collect();
        TensorField { grid: self.grid.clone(), rank: self.rank, symmetry: self.symmetry, data }
    }

    pub fn sub(&self, other: &TensorField) -> TensorField {
        self.axpy(-1.0, other)
    }

    pub fn with_symmetry(mut self, symmetry: Symmetry) -> Self {
        self.symmetry = symmetry;
        self
    }

    /// Largest violation of the declared symmetry over all points and components.
    pub fn symmetry_defect(&self) -> f64 {
        let n = self.grid.dim();
        let nc = self.ncomp();
        match self.symmetry {
            Symmetry::None => 0.0,
            Symmetry::Symmetric => self
                .data
                .chunks(nc)
                .map(|t| {
                    let mut m: f64 = 0.0;
                    for i in 0..n {
                        for j in 0..n {
                            m = m.max((t[i * n + j] - t[j * n + i]).abs());
                        }
                    }
                    m
                })
                .fold(0.0, f64::max),
            Symmetry::RiemannType => self
                .data
                .chunks(nc)
                .map(|t| {
                    let idx = |i: usize, j: usize, k: usize, l: usize| ((i * n + j) * n + k) * n + l;
                    let mut m: f64 = 0.0;
                    for i in 0..n {
                        for j in 0..n {
                            for k in 0..n {
                                for l in 0..n {
                                    let v = t[idx(i, j, k, l)];
                                    m = m.max((v + t[idx(j, i, k, l)]).abs());
                                    m = m.max((v + t[idx(i, j, l, k)]).abs());
                                    m = m.max((v - t[idx(k, l, i, j)]).abs());
                                }
                            }
                        }
                    }
                    m
                })
                .fold(0.0, f64::max),
        }
    }

    /// Projects every point onto the declared symmetry class.
    pub fn enforce_symmetry(&mut self) {
        let n = self.grid.dim();
        let nc = self.ncomp();
        match self.symmetry {
            Symmetry::None => {}
            Symmetry::Symmetric => self.data.par_chunks_mut(nc).for_each(|t| symmetrize2(n, t)),
            Symmetry::RiemannType => self.data.par_chunks_mut(nc).for_each(|t| {
                let idx = |i: usize, j: usize, k: usize, l: usize| ((i * n + j) * n + k) * n + l;
                let mut buf = [0.0; 4096];
                let src = &mut buf[..nc];
                src.copy_from_slice(t);
                for i in 0..n {
                    for j in 0..n {
                        for k in 0..n {
                            for l in 0..n {
                                let a = src[idx(i, j, k, l)] - src[idx(j, i, k, l)] - src[idx(i, j, l, k)]
                                    + src[idx(j, i, l, k)];
                                let b = src[idx(k, l, i, j)] - src[idx(l, k, i, j)] - src[idx(k, l, j, i)]
                                    + src[idx(l, k, j, i)];
                                t[idx(i, j, k, l)] = (a + b) / 8.0;
                            }
                        }
                    }
                }
            }),
        }
    }

    /// Copy of the field shifted by `offset` cells along `axis`: `out(x) = self(x - offset h)`.
    pub fn translated(&self, axis: usize, offset: isize) -> TensorField {
        let nc = self.ncomp();
        let grid = &self.grid;
        let data = par_map_points(grid.npoints(), nc, |p, out| {
            let q = grid.neighbor(p, axis, -offset);
            out.copy_from_slice(&self.data[q * nc..(q + 1) * nc]);
        });
        TensorField { grid: grid.clone(), rank: self.rank, symmetry: self.symmetry, data }
    }
}

pub(crate) fn symmetrize2(n: usize, t: &mut [f64]) {
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (t[i * n + j] + t[j * n + i]);
            t[i * n + j] = m;
            t[j * n + i] = m;
        }
    }
}

/// Symmetric positive-definite rank-2 field with cached inverse and volume density.
#[derive(Debug, Clone)]
pub struct MetricField {
    g: TensorField,
    inv: Vec<f64>,
    sqrt_det: Vec<f64>,
    min_eig: Vec<f64>,
    max_eig: Vec<f64>,
}

impl MetricField {
    /// Validates symmetry and positive definiteness and caches `g^{-1}` and `sqrt(det g)`.
    ///
    /// The stored components are symmetrized first.
    pub fn new(g: TensorField) -> Result<Self, MeshError> {
        if g.rank() != 2 {
            return Err(MeshError::RankMismatch { expected: 2, found: g.rank() });
        }
        let mut g = g.with_symmetry(Symmetry::Symmetric);
        g.enforce_symmetry();
        let n = g.grid().dim();
        let nc = n * n;
        let per_point: Vec<Result<(Vec<f64>, f64, f64, f64), MeshError>> = g
            .data()
            .par_chunks(nc)
            .enumerate()
            .map(|(p, gp)| {
                let m = DMatrix::from_row_slice(n, n, gp);
                let eig = SymmetricEigen::new(m.clone());
                let min = eig.eigenvalues.min();
                let max = eig.eigenvalues.max();
                if !(min.is_finite() && max.is_finite()) || min <= EPS_SPD * max.abs().max(f64::MIN_POSITIVE)
                {
                    return Err(MeshError::NotPositiveDefinite { point: p, min_eigenvalue: min });
                }
                let chol = m.cholesky().ok_or(MeshError::NotPositiveDefinite { point: p, min_eigenvalue: min })?;
                let det_sqrt: f64 = chol.l_dirty().diagonal().iter().product();
                let inv = chol.inverse();
                let mut out = vec![0.0; nc];
                for i in 0..n {
                    for j in 0..n {
                        out[i * n + j] = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                    }
                }
                Ok((out, det_sqrt, min, max))
            })
            .collect();
        let mut inv = Vec::with_capacity(nc * g.grid().npoints());
        let mut sqrt_det = Vec::with_capacity(g.grid().npoints());
        let mut min_eig = Vec::with_capacity(g.grid().npoints());
        let mut max_eig = Vec::with_capacity(g.grid().npoints());
        for r in per_point {
            let (i, d, lo, hi) = r?;
            inv.extend_from_slice(&i);
            sqrt_det.push(d);
            min_eig.push(lo);
            max_eig.push(hi);
        }
        Ok(Self { g, inv, sqrt_det, min_eig, max_eig })
    }

    /// The Euclidean metric `delta_ij`.
    pub fn flat(grid: &Arc<Grid>) -> Self {
        let n = grid.dim();
        let g = TensorField::from_fn(grid, 2, Symmetry::Symmetric, |_, out| {
            for i in 0..n {
                out[i * n + i] = 1.0;
            }
        });
        Self::new(g).expect("flat metric is positive definite")
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.g.grid()
    }

    pub fn dim(&self) -> usize {
        self.g.grid().dim()
    }

    pub fn tensor(&self) -> &TensorField {
        &self.g
    }

    pub fn g_at(&self, point: usize) -> &[f64] {
        self.g.at(point)
    }

    pub fn inv_at(&self, point: usize) -> &[f64] {
        let nc = self.dim() * self.dim();
        &self.inv[point * nc..(point + 1) * nc]
    }

    pub fn inverse_data(&self) -> &[f64] {
        &self.inv
    }

    pub fn sqrt_det(&self) -> &[f64] {
        &self.sqrt_det
    }

    /// Smallest eigenvalue of `g` over the grid.
    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eig.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Largest eigenvalue of `g^{-1}` over the grid.
    pub fn max_inverse_eigenvalue(&self) -> f64 {
        self.min_eig.iter().map(|l| 1.0 / l).fold(0.0, f64::max)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.max_eig.iter().copied().fold(0.0, f64::max)
    }

    /// Total volume `sum sqrt(det g) prod h_a`.
    pub fn volume(&self) -> f64 {
        self.grid().quadrature(deterministic_sum(&self.sqrt_det))
    }

    /// `c * g` for a constant `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self, MeshError> {
        Self::new(self.g.scaled(c))
    }

    /// `exp(2u) g` for a scalar field `u`.
    pub fn conformal(&self, u: &TensorField) -> Result<Self, MeshError> {
        let nc = self.dim() * self.dim();
        let mut g = self.g.clone();
        g.data_mut().par_chunks_mut(nc).zip(u.data().par_iter()).for_each(|(t, &uu)| {
            let f = (2.0 * uu).exp();
            t.iter_mut().for_each(|v| *v *= f);
        });
        Self::new(g)
    }
}

/// Evaluates `f(point, out)` for every grid point in parallel; `out` has `ncomp` slots.
pub(crate) fn par_map_points<F>(npoints: usize, ncomp: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let mut data = vec![0.0; npoints * ncomp];
    if ncomp == 0 {
        return data;
    }
    data.par_chunks_mut(ncomp).enumerate().for_each(|(p, out)| f(p, out));
    data
}

/// Like [`par_map_points`] with a per-thread scratch buffer of `scratch_len` values.
pub(crate) fn par_map_points_scratch<F>(npoints: usize, ncomp: usize, scratch_len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64], &mut [f64]) + Sync,
{
    let mut data = vec![0.0; npoints * ncomp];
    data.par_chunks_mut(ncomp)
        .enumerate()
        .for_each_init(|| vec![0.0; scratch_len], |scratch, (p, out)| f(p, out, scratch));
    data
}

/// Sum whose rounding does not depend on the number of worker threads.
pub fn deterministic_sum(values: &[f64]) -> f64 {
    let partials: Vec<f64> = values.par_chunks(REDUCTION_CHUNK).map(|c| c.iter().sum::<f64>()).collect();
    partials.iter().sum()
}

/// Thread-independent `sum_p f(p)`.
pub(crate) fn deterministic_sum_by<F>(npoints: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let nchunks = npoints.div_ceil(REDUCTION_CHUNK);
    let partials: Vec<f64> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * REDUCTION_CHUNK;
            let hi = (lo + REDUCTION_CHUNK).min(npoints);
            (lo..hi).map(&f).sum::<f64>()
        })
        .collect();
    partials.iter().sum()
}

/// Local gradient of `field` at `point`: `out[a * nc + c] = d_a field_c`.
#[inline]
pub(crate) fn gradient_at(field: &TensorField, stencil: &Stencil, point: usize, out: &mut [f64]) {
    let grid = field.grid();
    let nc = field.ncomp();
    let data = field.data();
    out[..grid.dim() * nc].fill(0.0);
    for a in 0..grid.dim() {
        if grid.sizes()[a] == 1 {
            continue;
        }
        let inv_h = 1.0 / grid.spacing()[a];
        let o = &mut out[a * nc..(a + 1) * nc];
        for (k, &w) in stencil.weights().iter().enumerate() {
            let off = (k + 1) as isize;
            let ip = grid.neighbor(point, a, off);
            let im = grid.neighbor(point, a, -off);
            let wp = &data[ip * nc..(ip + 1) * nc];
            let wm = &data[im * nc..(im + 1) * nc];
            let c = w * inv_h;
            for ((o, p), m) in o.iter_mut().zip(wp).zip(wm) {
                *o += c * (p - m);
            }
        }
    }
}

/// Central finite-difference derivative along one axis with periodic wrap-around.
pub fn partial_derivative(f: &TensorField, axis: usize, stencil: &Stencil) -> TensorField {
    let grid = f.grid().clone();
    assert!(axis < grid.dim(), "axis out of range");
    let nc = f.ncomp();
    let data = if grid.sizes()[axis] == 1 {
        vec![0.0; f.data().len()]
    } else {
        let inv_h = 1.0 / grid.spacing()[axis];
        par_map_points(grid.npoints(), nc, |p, out| {
            for (k, &w) in stencil.weights().iter().enumerate() {
                let off = (k + 1) as isize;
                let ip = grid.neighbor(p, axis, off);
                let im = grid.neighbor(p, axis, -off);
                for c in 0..nc {
                    out[c] += w * inv_h * (f.data()[ip * nc + c] - f.data()[im * nc + c]);
                }
            }
        })
    };
    TensorField::from_data(&grid, f.rank(), Symmetry::None, data)
}

/// All first partial derivatives, derivative index first: rank `r + 1`.
pub fn gradient(f: &TensorField, stencil: &Stencil) -> TensorField {
    let grid = f.grid().clone();
    let n = grid.dim();
    let nc = f.ncomp();
    let data = par_map_points(grid.npoints(), n * nc, |p, out| gradient_at(f, stencil, p, out));
    TensorField::from_data(&grid, f.rank() + 1, Symmetry::None, data)
}

/// Midpoint-rule integral `sum f sqrt(det g) prod h_a`.
pub fn integrate(f: &TensorField, g: &MetricField) -> f64 {
    assert_eq!(f.rank(), 0, "integrate expects a scalar field");
    let sd = g.sqrt_det();
    let fd = f.data();
    g.grid().quadrature(deterministic_sum_by(fd.len(), |p| fd[p] * sd[p]))
}

/// `<f, h>_mu` for scalar fields.
pub fn inner_mu(f: &TensorField, h: &TensorField, g: &MetricField) -> f64 {
    let sd = g.sqrt_det();
    let (a, b) = (f.data(), h.data());
    g.grid().quadrature(deterministic_sum_by(a.len(), |p| a[p] * b[p] * sd[p]))
}

/// `|T|^2` with every index contracted through `g^{-1}`, given one point's data.
pub fn norm_sq_at(n: usize, rank: usize, ginv: &[f64], t: &[f64], scratch: &mut Vec<f64>) -> f64 {
    if rank == 0 {
        return t[0] * t[0];
    }
    let nc = t.len();
    scratch.clear();
    scratch.extend_from_slice(t);
    let mut tmp = vec![0.0; nc];
    for slot in 0..rank {
        raise_slot(n, rank, slot, ginv, scratch, &mut tmp);
        std::mem::swap(scratch, &mut tmp);
    }
    t.iter().zip(scratch.iter()).map(|(a, b)| a * b).sum()
}

/// `out = T` with index `slot` raised by `g^{-1}`.
pub(crate) fn raise_slot(n: usize, rank: usize, slot: usize, ginv: &[f64], t: &[f64], out: &mut [f64]) {
    let stride = n.pow((rank - 1 - slot) as u32);
    for (c, o) in out.iter_mut().enumerate() {
        let i = (c / stride) % n;
        let base = c - i * stride;
        let mut acc = 0.0;
        for j in 0..n {
            acc += ginv[i * n + j] * t[base + j * stride];
        }
        *o = acc;
    }
}

/// Pointwise `|T|_g^2` as a scalar field.
pub fn norm_sq_field(t: &TensorField, g: &MetricField) -> TensorField {
    let grid = t.grid().clone();
    let n = grid.dim();
    let rank = t.rank();
    let nc = t.ncomp();
    let data = par_map_points_scratch(grid.npoints(), 1, nc, |p, out, _| {
        let mut s = Vec::with_capacity(nc);
        out[0] = norm_sq_at(n, rank, g.inv_at(p), t.at(p), &mut s);
    });
    TensorField::from_data(&grid, 0, Symmetry::None, data)
}

/// Sup and L2 norms of a tensor field with respect to `g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub sup: f64,
    pub l2: f64,
}

pub fn norms(t: &TensorField, g: &MetricField) -> Norms {
    let sq = norm_sq_field(t, g);
    let sup = sq.data().iter().fold(0.0_f64, |m, v| m.max(*v)).sqrt();
    let l2 = integrate(&sq, g).max(0.0).sqrt();
    Norms { sup, l2 }
}
