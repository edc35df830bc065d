//! Closed-form metric families and a grid-free curvature evaluator.
//!
//! Curvature is evaluated by running the same tensor formulas as the grid pipeline on
//! truncated Taylor jets of the metric, so every derivative is exact up to roundoff and
//! nothing here touches a stencil.

pub mod jet;

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{Grid, MetricField, Symmetry, TensorField};
use jet::{Jet, JetSpace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("metric family needs dimension at least 4, got {0}")]
    DimensionTooSmall(usize),
    #[error("wave vector has {found} entries, expected {expected}")]
    WaveLength { expected: usize, found: usize },
    #[error("{0}")]
    NotPositiveDefinite(String),
    #[error("axis index {0} out of range")]
    AxisOutOfRange(usize),
}

/// `A sin(2 pi sum_a k_a x_a / L_a + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierMode {
    pub wave: Vec<i32>,
    pub amplitude: f64,
    #[serde(default)]
    pub phase: f64,
}

/// Finite sum of Fourier modes; a smooth periodic scalar function on the torus.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FourierSeries {
    pub modes: Vec<FourierMode>,
}

impl FourierSeries {
    pub fn single(wave: Vec<i32>, amplitude: f64, phase: f64) -> Self {
        Self { modes: vec![FourierMode { wave, amplitude, phase }] }
    }

    fn angle(mode: &FourierMode, x: &[f64], periods: &[f64]) -> f64 {
        2.0 * PI * mode.wave.iter().zip(x).zip(periods).map(|((&k, &xa), &l)| k as f64 * xa / l).sum::<f64>()
            + mode.phase
    }

    fn wavenumber(mode: &FourierMode, periods: &[f64], a: usize) -> f64 {
        2.0 * PI * mode.wave[a] as f64 / periods[a]
    }

    pub fn value(&self, x: &[f64], periods: &[f64]) -> f64 {
        self.modes.iter().map(|m| m.amplitude * Self::angle(m, x, periods).sin()).sum()
    }

    pub fn gradient(&self, x: &[f64], periods: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut g = vec![0.0; n];
        for m in &self.modes {
            let c = m.amplitude * Self::angle(m, x, periods).cos();
            for (a, ga) in g.iter_mut().enumerate() {
                *ga += c * Self::wavenumber(m, periods, a);
            }
        }
        g
    }

    /// Row-major Hessian.
    pub fn hessian(&self, x: &[f64], periods: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut h = vec![0.0; n * n];
        for m in &self.modes {
            let s = -m.amplitude * Self::angle(m, x, periods).sin();
            for a in 0..n {
                for b in 0..n {
                    h[a * n + b] += s * Self::wavenumber(m, periods, a) * Self::wavenumber(m, periods, b);
                }
            }
        }
        h
    }

    pub fn laplacian(&self, x: &[f64], periods: &[f64]) -> f64 {
        let n = x.len();
        let h = self.hessian(x, periods);
        (0..n).map(|a| h[a * n + a]).sum()
    }

    /// Sum of absolute amplitudes, a bound on `sup |u|`.
    pub fn amplitude_bound(&self) -> f64 {
        self.modes.iter().map(|m| m.amplitude.abs()).sum()
    }

    pub fn jet(&self, space: &JetSpace, x: &[f64], periods: &[f64]) -> Jet {
        let mut out = space.zero();
        for m in &self.modes {
            let mut arg = space.constant(m.phase);
            for (a, &xa) in x.iter().enumerate() {
                if m.wave[a] != 0 {
                    let c = 2.0 * PI * m.wave[a] as f64 / periods[a];
                    space.add_scaled(&mut arg, c, &space.variable(a, xa));
                }
            }
            space.add_scaled(&mut out, m.amplitude, &space.sin(&arg));
        }
        out
    }

    pub fn sample(&self, grid: &Arc<Grid>) -> TensorField {
        let periods = grid.periods().to_vec();
        TensorField::scalar_from_fn(grid, |x| self.value(x, &periods))
    }

    fn check(&self, dim: usize) -> Result<(), OracleError> {
        for m in &self.modes {
            if m.wave.len() != dim {
                return Err(OracleError::WaveLength { expected: dim, found: m.wave.len() });
            }
        }
        Ok(())
    }
}

/// Closed-form metric families with known SPD guarantees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricFamily {
    Flat,
    ConstantDiagonal {
        diagonal: Vec<f64>,
    },
    /// `exp(2u) delta`.
    ConformallyFlat {
        u: FourierSeries,
    },
    /// `exp(2 alpha) delta` on axes `< split`, `exp(2 beta) delta` on the rest.
    DoublyWarped {
        split: usize,
        alpha: FourierSeries,
        beta: FourierSeries,
    },
    /// `delta + A sin(2 pi k.x/L) (dx^i dx^j + dx^j dx^i)`, SPD for `|A| < 1`.
    OffDiagonalPerturbation {
        amplitude: f64,
        axes: [usize; 2],
        wave: Vec<i32>,
    },
    /// `exp(2u) g_base`.
    Conformal {
        u: FourierSeries,
        base: Box<MetricFamily>,
    },
}

impl MetricFamily {
    pub fn validate(&self, dim: usize) -> Result<(), OracleError> {
        if dim < 4 {
            return Err(OracleError::DimensionTooSmall(dim));
        }
        match self {
            Self::Flat => Ok(()),
            Self::ConstantDiagonal { diagonal } => {
                if diagonal.len() != dim {
                    return Err(OracleError::WaveLength { expected: dim, found: diagonal.len() });
                }
                if diagonal.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
                    return Err(OracleError::NotPositiveDefinite("diagonal entries must be positive".into()));
                }
                Ok(())
            }
            Self::ConformallyFlat { u } => u.check(dim),
            Self::DoublyWarped { split, alpha, beta } => {
                if *split == 0 || *split >= dim {
                    return Err(OracleError::AxisOutOfRange(*split));
                }
                alpha.check(dim)?;
                beta.check(dim)
            }
            Self::OffDiagonalPerturbation { amplitude, axes, wave } => {
                if axes[0] >= dim || axes[1] >= dim {
                    return Err(OracleError::AxisOutOfRange(axes[0].max(axes[1])));
                }
                if axes[0] == axes[1] {
                    return Err(OracleError::NotPositiveDefinite("off-diagonal axes must differ".into()));
                }
                if wave.len() != dim {
                    return Err(OracleError::WaveLength { expected: dim, found: wave.len() });
                }
                if amplitude.abs() >= 1.0 {
                    return Err(OracleError::NotPositiveDefinite(format!(
                        "off-diagonal amplitude {amplitude} must satisfy |A| < 1"
                    )));
                }
                Ok(())
            }
            Self::Conformal { u, base } => {
                u.check(dim)?;
                base.validate(dim)
            }
        }
    }

    /// Metric components at `x`, row-major.
    pub fn metric_at(&self, x: &[f64], periods: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut g = vec![0.0; n * n];
        match self {
            Self::Flat => (0..n).for_each(|i| g[i * n + i] = 1.0),
            Self::ConstantDiagonal { diagonal } => (0..n).for_each(|i| g[i * n + i] = diagonal[i]),
            Self::ConformallyFlat { u } => {
                let f = (2.0 * u.value(x, periods)).exp();
                (0..n).for_each(|i| g[i * n + i] = f);
            }
            Self::DoublyWarped { split, alpha, beta } => {
                let fa = (2.0 * alpha.value(x, periods)).exp();
                let fb = (2.0 * beta.value(x, periods)).exp();
                (0..n).for_each(|i| g[i * n + i] = if i < *split { fa } else { fb });
            }
            Self::OffDiagonalPerturbation { amplitude, axes, wave } => {
                (0..n).for_each(|i| g[i * n + i] = 1.0);
                let s = amplitude * FourierSeries::single(wave.clone(), 1.0, 0.0).value(x, periods);
                g[axes[0] * n + axes[1]] = s;
                g[axes[1] * n + axes[0]] = s;
            }
            Self::Conformal { u, base } => {
                g = base.metric_at(x, periods);
                let f = (2.0 * u.value(x, periods)).exp();
                g.iter_mut().for_each(|v| *v *= f);
            }
        }
        g
    }

    /// Metric components as jets centred at `x`.
    pub fn metric_jet(&self, space: &JetSpace, x: &[f64], periods: &[f64]) -> Vec<Jet> {
        let n = x.len();
        let mut g: Vec<Jet> = (0..n * n).map(|_| space.zero()).collect();
        match self {
            Self::Flat => (0..n).for_each(|i| g[i * n + i] = space.constant(1.0)),
            Self::ConstantDiagonal { diagonal } => (0..n).for_each(|i| g[i * n + i] = space.constant(diagonal[i])),
            Self::ConformallyFlat { u } => {
                let f = space.exp(&u.jet(space, x, periods).scaled(2.0));
                (0..n).for_each(|i| g[i * n + i] = f.clone());
            }
            Self::DoublyWarped { split, alpha, beta } => {
                let fa = space.exp(&alpha.jet(space, x, periods).scaled(2.0));
                let fb = space.exp(&beta.jet(space, x, periods).scaled(2.0));
                (0..n).for_each(|i| g[i * n + i] = if i < *split { fa.clone() } else { fb.clone() });
            }
            Self::OffDiagonalPerturbation { amplitude, axes, wave } => {
                (0..n).for_each(|i| g[i * n + i] = space.constant(1.0));
                let s = FourierSeries::single(wave.clone(), *amplitude, 0.0).jet(space, x, periods);
                g[axes[0] * n + axes[1]] = s.clone();
                g[axes[1] * n + axes[0]] = s;
            }
            Self::Conformal { u, base } => {
                let f = space.exp(&u.jet(space, x, periods).scaled(2.0));
                g = base.metric_jet(space, x, periods).iter().map(|gij| space.mul(&f, gij)).collect();
            }
        }
        g
    }
}

/// A metric family on a torus of given periods.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticMetric {
    family: MetricFamily,
    periods: Vec<f64>,
}

impl AnalyticMetric {
    pub fn new(family: MetricFamily, periods: Vec<f64>) -> Result<Self, OracleError> {
        family.validate(periods.len())?;
        Ok(Self { family, periods })
    }

    pub fn unit(family: MetricFamily, dim: usize) -> Result<Self, OracleError> {
        Self::new(family, vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.periods.len()
    }

    pub fn family(&self) -> &MetricFamily {
        &self.family
    }

    pub fn periods(&self) -> &[f64] {
        &self.periods
    }

    pub fn metric_at(&self, x: &[f64]) -> Vec<f64> {
        self.family.metric_at(x, &self.periods)
    }

    /// Samples `g` at grid nodes.
    pub fn sample_to_grid(&self, grid: &Arc<Grid>) -> Result<MetricField, OracleError> {
        if grid.periods() != self.periods.as_slice() {
            return Err(OracleError::NotPositiveDefinite("grid periods differ from family periods".into()));
        }
        let t = TensorField::from_fn(grid, 2, Symmetry::Symmetric, |x, out| {
            out.copy_from_slice(&self.metric_at(x));
        });
        MetricField::new(t).map_err(|e| OracleError::NotPositiveDefinite(e.to_string()))
    }

    /// Exact curvature quantities at `x`.
    pub fn bundle_at(&self, x: &[f64], opts: &OracleOptions) -> OraclePoint {
        let space = JetSpace::new(self.dim(), opts.degree());
        self.bundle_at_in(&space, x, opts)
    }

    pub fn bundle_at_in(&self, space: &JetSpace, x: &[f64], opts: &OracleOptions) -> OraclePoint {
        let geo = JetGeometry::new(space, self.family.metric_jet(space, x, &self.periods));
        geo.bundle(opts)
    }

    /// [`AnalyticMetric::bundle_at`] at many points in parallel.
    pub fn bundle_at_points(&self, points: &[Vec<f64>], opts: &OracleOptions) -> Vec<OraclePoint> {
        let space = JetSpace::new(self.dim(), opts.degree());
        points.par_iter().map(|x| self.bundle_at_in(&space, x, opts)).collect()
    }

    /// `count` uniformly distributed points on the torus, reproducible from `seed`.
    pub fn random_points(&self, seed: u64, count: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.periods.iter().map(|&l| rng.random::<f64>() * l).collect()).collect()
    }
}

/// Which optional (expensive) quantities [`AnalyticMetric::bundle_at`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    /// Number of covariant derivatives of Rm to evaluate (0, 1 or 2).
    pub rm_derivatives: usize,
    /// Evaluate the Weyl form of Bach and the Cotton–Weyl divergence.
    pub weyl_form: bool,
    /// Evaluate `div B` and the pressure right-hand side.
    pub bach_derivatives: bool,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self { rm_derivatives: 2, weyl_form: true, bach_derivatives: true }
    }
}

impl OracleOptions {
    /// Jet degree needed for the requested quantities: Bach uses four derivatives of `g`,
    /// each further covariant derivative one more.
    pub fn degree(&self) -> usize {
        let mut d = 4.max(2 + self.rm_derivatives);
        if self.bach_derivatives {
            d = d.max(6);
        }
        d
    }

    pub fn basic() -> Self {
        Self { rm_derivatives: 0, weyl_form: false, bach_derivatives: false }
    }
}

/// Point values of the curvature pipeline; layouts match the grid fields.
#[derive(Debug, Clone, Default)]
pub struct OraclePoint {
    pub g: Vec<f64>,
    pub ginv: Vec<f64>,
    /// `[k][i][j]` = `Gamma^k_ij`.
    pub gamma: Vec<f64>,
    pub rm: Vec<f64>,
    pub rc: Vec<f64>,
    pub s: f64,
    pub a: Vec<f64>,
    pub w: Vec<f64>,
    pub c: Vec<f64>,
    pub b_primary: Vec<f64>,
    /// Empty unless `weyl_form`.
    pub b_alt: Vec<f64>,
    /// `g^{lm} nabla_m W_lijk`, empty unless `weyl_form`.
    pub div_w: Vec<f64>,
    /// `g^{jk} nabla_k B_ij`, empty unless `bach_derivatives`.
    pub div_b: Vec<f64>,
    /// `-(n-2) A.B + nabla_i nabla_j B^ij`, NaN unless `bach_derivatives`.
    pub pressure_rhs: f64,
    pub grad_rm: Vec<f64>,
    pub hess_rm: Vec<f64>,
}

impl OraclePoint {
    pub fn dim(&self) -> usize {
        (self.g.len() as f64).sqrt().round() as usize
    }

    /// Residual vector of the Bach divergence identity
    /// `div B_i - (n-4)/(n-2) C_jki R^jk`, or just `div B` without the Cotton term.
    pub fn bach_divergence_residual(&self, include_cotton: bool) -> Vec<f64> {
        let n = self.dim();
        let mut r = self.div_b.clone();
        if include_cotton {
            let c = -(n as f64 - 4.0) / (n as f64 - 2.0);
            let rc_up = raise_pair(n, &self.ginv, &self.rc);
            for (i, ri) in r.iter_mut().enumerate() {
                let mut acc = 0.0;
                for j in 0..n {
                    for k in 0..n {
                        acc += self.c[(j * n + k) * n + i] * rc_up[j * n + k];
                    }
                }
                *ri += c * acc;
            }
        }
        r
    }

    /// `C - div W / (n-3)`.
    pub fn cotton_weyl_residual(&self) -> Vec<f64> {
        let n = self.dim() as f64;
        let f = 1.0 / (n - 3.0);
        self.c.iter().zip(&self.div_w).map(|(c, d)| c - f * d).collect()
    }
}

fn raise_pair(n: usize, ginv: &[f64], t: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for a in 0..n {
                for b in 0..n {
                    acc += ginv[i * n + a] * ginv[j * n + b] * t[a * n + b];
                }
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Levi-Civita geometry of a metric given as jets at one point.
pub struct JetGeometry<'a> {
    space: &'a JetSpace,
    n: usize,
    g: Vec<Jet>,
    ginv: Vec<Jet>,
    gamma: Vec<Jet>,
}

impl<'a> JetGeometry<'a> {
    pub fn new(space: &'a JetSpace, g: Vec<Jet>) -> Self {
        let n = space.nvars();
        let ginv = space.mat_inverse(n, &g);
        let dg: Vec<Jet> = (0..n).flat_map(|a| g.iter().map(move |gij| (a, gij))).map(|(a, gij)| space.deriv(gij, a)).collect();
        let d = |a: usize, i: usize, j: usize| &dg[(a * n + i) * n + j];
        let mut gamma = Vec::with_capacity(n * n * n);
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let mut acc = space.zero();
                    for l in 0..n {
                        let t = space.sub(&space.add(d(i, j, l), d(j, i, l)), d(l, i, j));
                        space.fma(&mut acc, 0.5, &ginv[k * n + l], &t);
                    }
                    gamma.push(acc);
                }
            }
        }
        Self { space, n, g, ginv, gamma }
    }

    pub fn space(&self) -> &JetSpace {
        self.space
    }

    pub fn metric(&self) -> &[Jet] {
        &self.g
    }

    pub fn inverse(&self) -> &[Jet] {
        &self.ginv
    }

    pub fn christoffel(&self) -> &[Jet] {
        &self.gamma
    }

    /// Covariant derivative of a rank-`rank` covariant tensor; derivative index first.
    pub fn cov_deriv(&self, rank: usize, t: &[Jet]) -> Vec<Jet> {
        let (s, n) = (self.space, self.n);
        let nc = n.pow(rank as u32);
        let mut out = Vec::with_capacity(n * nc);
        for a in 0..n {
            for c in 0..nc {
                let mut acc = s.deriv(&t[c], a);
                for slot in 0..rank {
                    let stride = n.pow((rank - 1 - slot) as u32);
                    let i = (c / stride) % n;
                    let base = c - i * stride;
                    for k in 0..n {
                        s.fma(&mut acc, -1.0, &self.gamma[(k * n + a) * n + i], &t[base + k * stride]);
                    }
                }
                out.push(acc);
            }
        }
        out
    }

    /// Contravariant-contravariant contraction of two slots with `g^{-1}`:
    /// `sum g^{pq} T[.. p .. q ..]` with `p` at `slot_a` and `q` at `slot_b`.
    pub fn trace(&self, rank: usize, t: &[Jet], slot_a: usize, slot_b: usize) -> Vec<Jet> {
        let (s, n) = (self.space, self.n);
        assert!(slot_a < slot_b && slot_b < rank);
        let out_rank = rank - 2;
        let nc = n.pow(out_rank as u32);
        let mut out = Vec::with_capacity(nc);
        let mut idx = vec![0usize; rank];
        for c in 0..nc {
            let mut rest = Vec::with_capacity(out_rank);
            for slot in 0..out_rank {
                rest.push((c / n.pow((out_rank - 1 - slot) as u32)) % n);
            }
            let mut acc = s.zero();
            for p in 0..n {
                for q in 0..n {
                    let mut r = rest.iter();
                    for (slot, v) in idx.iter_mut().enumerate() {
                        *v = if slot == slot_a {
                            p
                        } else if slot == slot_b {
                            q
                        } else {
                            *r.next().unwrap()
                        };
                    }
                    let flat = idx.iter().fold(0, |f, &v| f * n + v);
                    s.fma(&mut acc, 1.0, &self.ginv[p * n + q], &t[flat]);
                }
            }
            out.push(acc);
        }
        out
    }

    fn raise2(&self, t: &[Jet]) -> Vec<Jet> {
        let (s, n) = (self.space, self.n);
        let mut half = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = s.zero();
                for b in 0..n {
                    s.fma(&mut acc, 1.0, &self.ginv[j * n + b], &t[i * n + b]);
                }
                half.push(acc);
            }
        }
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = s.zero();
                for a in 0..n {
                    s.fma(&mut acc, 1.0, &self.ginv[i * n + a], &half[a * n + j]);
                }
                out.push(acc);
            }
        }
        out
    }

    fn symmetrize(&self, t: &mut [Jet]) {
        let (s, n) = (self.space, self.n);
        for i in 0..n {
            for j in i + 1..n {
                let m = s.add(&t[i * n + j], &t[j * n + i]).scaled(0.5);
                t[i * n + j] = m.clone();
                t[j * n + i] = m;
            }
        }
    }

    /// Riemann tensor `R_ijkl = g_lm R^m_ijk`.
    pub fn riemann(&self) -> Vec<Jet> {
        let (s, n) = (self.space, self.n);
        let gam = |k: usize, i: usize, j: usize| &self.gamma[(k * n + i) * n + j];
        let dgam: Vec<Jet> = (0..n).flat_map(|a| self.gamma.iter().map(move |x| (a, x))).map(|(a, x)| s.deriv(x, a)).collect();
        let dg = |a: usize, k: usize, i: usize, j: usize| &dgam[((a * n + k) * n + i) * n + j];
        // R^l_ijk
        let mut rup = Vec::with_capacity(n * n * n * n);
        for l in 0..n {
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        let mut acc = s.sub(dg(i, l, j, k), dg(j, l, i, k));
                        for p in 0..n {
                            s.fma(&mut acc, 1.0, gam(l, i, p), gam(p, j, k));
                            s.fma(&mut acc, -1.0, gam(l, j, p), gam(p, i, k));
                        }
                        rup.push(acc);
                    }
                }
            }
        }
        let mut rm = Vec::with_capacity(n * n * n * n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let mut acc = s.zero();
                        for m in 0..n {
                            s.fma(&mut acc, 1.0, &self.g[l * n + m], &rup[((m * n + i) * n + j) * n + k]);
                        }
                        rm.push(acc);
                    }
                }
            }
        }
        rm
    }

    /// Full pipeline at the expansion point.
    pub fn bundle(&self, opts: &OracleOptions) -> OraclePoint {
        let (s, n) = (self.space, self.n);
        let nf = n as f64;
        let idx4 = |i: usize, j: usize, k: usize, l: usize| ((i * n + j) * n + k) * n + l;
        let rm = self.riemann();
        // R_ij = g^{kl} R_iklj
        let rc = self.trace(4, &reorder4(n, &rm, [0, 3, 1, 2]), 2, 3);
        let mut sc = s.zero();
        for i in 0..n {
            for j in 0..n {
                s.fma(&mut sc, 1.0, &self.ginv[i * n + j], &rc[i * n + j]);
            }
        }
        let mut a = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let mut v = rc[i * n + j].clone();
                s.fma(&mut v, -1.0 / (2.0 * (nf - 1.0)), &sc, &self.g[i * n + j]);
                a.push(v.scaled(1.0 / (nf - 2.0)));
            }
        }
        let mut w = Vec::with_capacity(n * n * n * n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let mut v = rm[idx4(i, j, k, l)].clone();
                        s.fma(&mut v, 1.0, &a[i * n + k], &self.g[j * n + l]);
                        s.fma(&mut v, 1.0, &a[j * n + l], &self.g[i * n + k]);
                        s.fma(&mut v, -1.0, &a[i * n + l], &self.g[j * n + k]);
                        s.fma(&mut v, -1.0, &a[j * n + k], &self.g[i * n + l]);
                        w.push(v);
                    }
                }
            }
        }
        let na = self.cov_deriv(2, &a); // [k][i][j] = nabla_k A_ij
        let mut c = Vec::with_capacity(n * n * n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    c.push(s.sub(&na[(k * n + i) * n + j], &na[(j * n + i) * n + k]));
                }
            }
        }
        let nna = self.cov_deriv(3, &na); // [a][b][i][j] = nabla_a nabla_b A_ij
        let lap_a = self.trace(4, &nna, 0, 1);
        // g^{ab} nabla_a nabla_i A_jb: reorder to [i][j][a][b]
        let mixed = self.trace(4, &reorder4(n, &nna, [1, 2, 0, 3]), 2, 3);
        let a_up = self.raise2(&a);
        let mut b = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let mut v = s.sub(&lap_a[i * n + j], &mixed[i * n + j]);
                for k in 0..n {
                    for l in 0..n {
                        s.fma(&mut v, 1.0, &a_up[k * n + l], &w[idx4(i, k, l, j)]);
                    }
                }
                b.push(v);
            }
        }
        self.symmetrize(&mut b);

        let mut out = OraclePoint {
            g: values(&self.g),
            ginv: values(&self.ginv),
            gamma: values(&self.gamma),
            rm: values(&rm),
            rc: values(&rc),
            s: sc.value(),
            a: values(&a),
            w: values(&w),
            c: values(&c),
            b_primary: values(&b),
            pressure_rhs: f64::NAN,
            ..Default::default()
        };

        if opts.weyl_form {
            let nw = self.cov_deriv(4, &w); // [m][l][i][j][k]
            // div W_ijk = g^{lm} nabla_m W_lijk
            out.div_w = values(&self.trace(5, &nw, 0, 1));
            // V_ikj = g^{lb} nabla_b W_iklj : reorder nabla W [b][i][k][l][j] -> [i][k][j][b][l]
            let mut reordered = Vec::with_capacity(nw.len());
            for i in 0..n {
                for k in 0..n {
                    for j in 0..n {
                        for bb in 0..n {
                            for l in 0..n {
                                reordered.push(nw[(((bb * n + i) * n + k) * n + l) * n + j].clone());
                            }
                        }
                    }
                }
            }
            let v = self.trace(5, &reordered, 3, 4); // [i][k][j]
            let nv = self.cov_deriv(3, &v); // [a][i][k][j]
            // g^{ka} nabla_a V_ikj : reorder to [i][j][a][k]
            let mut r2 = Vec::with_capacity(nv.len());
            for i in 0..n {
                for j in 0..n {
                    for aa in 0..n {
                        for k in 0..n {
                            r2.push(nv[((aa * n + i) * n + k) * n + j].clone());
                        }
                    }
                }
            }
            let ddw = self.trace(4, &r2, 2, 3);
            let rc_up = self.raise2(&rc);
            let mut balt = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    let mut v = ddw[i * n + j].scaled(1.0 / (nf - 3.0));
                    for k in 0..n {
                        for l in 0..n {
                            s.fma(&mut v, 1.0 / (nf - 2.0), &rc_up[k * n + l], &w[idx4(i, k, l, j)]);
                        }
                    }
                    balt.push(v);
                }
            }
            self.symmetrize(&mut balt);
            out.b_alt = values(&balt);
        }

        if opts.bach_derivatives {
            let nb = self.cov_deriv(2, &b); // [k][i][j]
            // g^{jk} nabla_k B_ij: reorder to [i][k][j]
            let mut r = Vec::with_capacity(nb.len());
            for i in 0..n {
                for k in 0..n {
                    for j in 0..n {
                        r.push(nb[(k * n + i) * n + j].clone());
                    }
                }
            }
            out.div_b = values(&self.trace(3, &r, 1, 2));
            let nnb = self.cov_deriv(3, &nb); // [a][b][i][j]
            let mut dd = s.zero();
            for aa in 0..n {
                for bb in 0..n {
                    for i in 0..n {
                        for j in 0..n {
                            let gg = s.mul(&self.ginv[aa * n + i], &self.ginv[bb * n + j]);
                            s.fma(&mut dd, 1.0, &gg, &nnb[idx4(aa, bb, i, j)]);
                        }
                    }
                }
            }
            let mut ab = s.zero();
            for i in 0..n {
                for j in 0..n {
                    s.fma(&mut ab, 1.0, &a_up[i * n + j], &b[i * n + j]);
                }
            }
            out.pressure_rhs = dd.value() - (nf - 2.0) * ab.value();
        }

        if opts.rm_derivatives >= 1 {
            let nrm = self.cov_deriv(4, &rm);
            if opts.rm_derivatives >= 2 {
                out.hess_rm = values(&self.cov_deriv(5, &nrm));
            }
            out.grad_rm = values(&nrm);
        }
        out
    }
}

fn values(t: &[Jet]) -> Vec<f64> {
    t.iter().map(Jet::value).collect()
}

/// Permutes a rank-4 array: `out[p0][p1][p2][p3]` with `out[idx] = t[src]` where
/// `src[perm[s]] = idx[s]`.
fn reorder4(n: usize, t: &[Jet], perm: [usize; 4]) -> Vec<Jet> {
    let mut out = Vec::with_capacity(t.len());
    let mut src = [0usize; 4];
    for i0 in 0..n {
        for i1 in 0..n {
            for i2 in 0..n {
                for i3 in 0..n {
                    let idx = [i0, i1, i2, i3];
                    for s in 0..4 {
                        src[perm[s]] = idx[s];
                    }
                    out.push(t[((src[0] * n + src[1]) * n + src[2]) * n + src[3]].clone());
                }
            }
        }
    }
    out
}

/// Hand-derived curvature of `exp(2u) delta`, independent of the jet pipeline.
pub mod conformal {
    use super::FourierSeries;

    /// `Gamma^k_ij = delta^k_i u_j + delta^k_j u_i - delta_ij u_k`, layout `[k][i][j]`.
    pub fn christoffel(u: &FourierSeries, x: &[f64], periods: &[f64]) -> Vec<f64> {
        let n = x.len();
        let du = u.gradient(x, periods);
        let mut out = vec![0.0; n * n * n];
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let mut v = 0.0;
                    if k == i {
                        v += du[j];
                    }
                    if k == j {
                        v += du[i];
                    }
                    if i == j {
                        v -= du[k];
                    }
                    out[(k * n + i) * n + j] = v;
                }
            }
        }
        out
    }

    /// `Rc = -(n-2)(D^2 u - du du) - (D^2 u trace + (n-2)|du|^2) delta`.
    pub fn ricci(u: &FourierSeries, x: &[f64], periods: &[f64]) -> Vec<f64> {
        let n = x.len();
        let nf = n as f64;
        let du = u.gradient(x, periods);
        let h = u.hessian(x, periods);
        let lap: f64 = (0..n).map(|a| h[a * n + a]).sum();
        let grad2: f64 = du.iter().map(|v| v * v).sum();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut v = -(nf - 2.0) * (h[i * n + j] - du[i] * du[j]);
                if i == j {
                    v -= lap + (nf - 2.0) * grad2;
                }
                out[i * n + j] = v;
            }
        }
        out
    }

    /// `S = exp(-2u)(-2(n-1) D u - (n-1)(n-2)|du|^2)`.
    pub fn scalar(u: &FourierSeries, x: &[f64], periods: &[f64]) -> f64 {
        let nf = x.len() as f64;
        let du = u.gradient(x, periods);
        let grad2: f64 = du.iter().map(|v| v * v).sum();
        let lap = u.laplacian(x, periods);
        (-2.0 * u.value(x, periods)).exp() * (-2.0 * (nf - 1.0) * lap - (nf - 1.0) * (nf - 2.0) * grad2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn warped(dim: usize) -> AnalyticMetric {
        let mut w1 = vec![0; dim];
        w1[1] = 1;
        let mut w0 = vec![0; dim];
        w0[0] = 1;
        let mut w2 = vec![0; dim];
        w2[0] = 1;
        w2[1] = 1;
        AnalyticMetric::unit(
            MetricFamily::DoublyWarped {
                split: 2,
                alpha: FourierSeries {
                    modes: vec![
                        FourierMode { wave: w1, amplitude: 0.1, phase: 0.3 },
                        FourierMode { wave: w2, amplitude: 0.05, phase: 1.1 },
                    ],
                },
                beta: FourierSeries::single(w0, 0.08, -0.4),
            },
            dim,
        )
        .unwrap()
    }

    fn conformally_flat() -> (FourierSeries, AnalyticMetric) {
        let u = FourierSeries {
            modes: vec![
                FourierMode { wave: vec![1, 0, 1, 0], amplitude: 0.1, phase: 0.2 },
                FourierMode { wave: vec![0, 1, 0, 2], amplitude: 0.05, phase: -0.7 },
            ],
        };
        (u.clone(), AnalyticMetric::unit(MetricFamily::ConformallyFlat { u }, 4).unwrap())
    }

    fn sup(v: &[f64]) -> f64 {
        v.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    #[test]
    fn flat_family_is_zero() {
        let m = AnalyticMetric::unit(MetricFamily::Flat, 4).unwrap();
        let p = m.bundle_at(&[0.1, 0.2, 0.3, 0.4], &OracleOptions::default());
        for v in [&p.gamma, &p.rm, &p.rc, &p.a, &p.w, &p.c, &p.b_primary, &p.b_alt, &p.grad_rm, &p.hess_rm] {
            assert_eq!(sup(v), 0.0);
        }
        assert_eq!(p.s, 0.0);
        assert_eq!(p.pressure_rhs, 0.0);
    }

    #[test]
    fn conformally_flat_matches_closed_form() {
        let (u, m) = conformally_flat();
        for x in m.random_points(7, 10) {
            let p = m.bundle_at(&x, &OracleOptions::basic());
            let gam = conformal::christoffel(&u, &x, m.periods());
            let rc = conformal::ricci(&u, &x, m.periods());
            let s = conformal::scalar(&u, &x, m.periods());
            assert!(p.gamma.iter().zip(&gam).all(|(a, b)| (a - b).abs() < 1e-13));
            assert!(p.rc.iter().zip(&rc).all(|(a, b)| (a - b).abs() < 1e-11), "{:?} {:?}", p.rc, rc);
            assert!((p.s - s).abs() < 1e-11 * s.abs().max(1.0));
            assert!(sup(&p.w) < 1e-10);
            assert!(sup(&p.b_primary) < 1e-10);
        }
    }

    #[test]
    fn round_sphere_sign_convention() {
        // A conformally flat metric has positive scalar curvature where u is at a strict
        // local maximum with |du| = 0 (S = -6 exp(-2u) Du > 0).
        let u = FourierSeries::single(vec![1, 0, 0, 0], 0.1, 0.0);
        let m = AnalyticMetric::unit(MetricFamily::ConformallyFlat { u }, 4).unwrap();
        let p = m.bundle_at(&[0.25, 0.0, 0.0, 0.0], &OracleOptions::basic());
        assert!(p.s > 0.0);
        // Sectional curvature R_ijji in a plane containing the bump direction is positive.
        let n = 4;
        assert!(p.rm[((n * n) * n) + 1] > 0.0);
    }

    #[test]
    fn warped_self_consistency() {
        for dim in [4, 5] {
            let m = warped(dim);
            let pts = m.random_points(11, 3);
            for p in m.bundle_at_points(&pts, &OracleOptions { rm_derivatives: 0, ..Default::default() }) {
                let n = dim;
                let scale = sup(&p.b_primary).max(1e-3);
                let trace: f64 = (0..n * n).map(|k| p.ginv[k] * p.b_primary[k]).sum();
                assert!(trace.abs() < 1e-9 * scale, "trace {trace}");
                let dual = p.b_primary.iter().zip(&p.b_alt).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(dual < 1e-9 * scale, "dim {dim} dual {dual} scale {scale}");
                let cw = sup(&p.cotton_weyl_residual());
                assert!(cw < 1e-9 * sup(&p.c), "dim {dim} cotton-weyl {cw} vs {}", sup(&p.c));
                let lemma = sup(&p.bach_divergence_residual(true));
                assert!(lemma < 1e-9 * sup(&p.div_b).max(scale), "dim {dim} lemma {lemma}");
                if dim == 5 {
                    assert!(sup(&p.bach_divergence_residual(false)) > 1e3 * lemma.max(1e-14));
                }
                // Weyl is totally trace-free.
                let mut tr: f64 = 0.0;
                for j in 0..n {
                    for k in 0..n {
                        let v: f64 = (0..n)
                            .flat_map(|i| (0..n).map(move |l| (i, l)))
                            .map(|(i, l)| p.ginv[i * n + l] * p.w[((i * n + j) * n + k) * n + l])
                            .sum();
                        tr = tr.max(v.abs());
                    }
                }
                assert!(tr < 1e-12);
                assert!(sup(&p.w) > 1e-3);
            }
        }
    }
}
