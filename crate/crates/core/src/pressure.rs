//! The pressure equation `((n-1) Δ_g + s0) p = -(n-2) A.B + ∇_i∇_j B^ij`.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::curvature::{map_covariant, raise_pair_into, CurvatureBundle};
use crate::krylov::{lanczos, minres, wdot, wnorm, Preconditioner, WeightedOperator};
use crate::mesh::{par_map_points, Grid, MetricField, Stencil, Symmetry, TensorField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PressureError {
    #[error("pressure solve did not converge in {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("pressure operator is near singular (invertibility margin {margin:e} below {floor:e})")]
    NearSingularOperator { margin: f64, floor: f64 },
    #[error("right-hand side is incompatible with the kernel at s0 = 0 (defect {defect:e} above {tolerance:e})")]
    IncompatibleRHS { defect: f64, tolerance: f64 },
}

/// Preconditioner of the MINRES pressure solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreconditionerKind {
    None,
    /// Diagonal of the operator.
    Jacobi,
    /// Constant-coefficient operator inverted by FFT ([`SpectralPreconditioner`]).
    Spectral,
}

/// Solver settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PressureOptions {
    /// Relative residual target in the discrete `L^2(dμ)` norm.
    pub tol: f64,
    /// Iteration cap; `None` means ten times the number of grid points.
    pub max_iter: Option<usize>,
    pub preconditioner: PreconditionerKind,
    /// Absolute bound on the kernel components of the right-hand side when `s0 = 0`.
    pub compat_tol: f64,
    /// Floor on the relative invertibility margin.
    pub eps_inv: f64,
    /// Lanczos steps of the invertibility probe.
    pub probe_steps: usize,
    /// Run the Lanczos probe before solving.
    pub probe: bool,
}

impl Default for PressureOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: None,
            preconditioner: PreconditionerKind::Spectral,
            compat_tol: 1e-6,
            eps_inv: 1e-8,
            probe_steps: 30,
            probe: true,
        }
    }
}

/// `((n-1) Δ_g + s0) p = rhs` on one metric.
#[derive(Debug, Clone)]
pub struct EllipticProblem<'a> {
    pub metric: &'a MetricField,
    pub s0: f64,
    pub rhs: TensorField,
    pub initial_guess: Option<&'a TensorField>,
    pub stencil: Stencil,
    pub options: PressureOptions,
}

#[derive(Debug, Clone)]
pub struct PressureSolution {
    pub p: TensorField,
    pub iterations: usize,
    /// `||L p - rhs|| / ||rhs||` (zero when the right-hand side vanishes).
    pub residual: f64,
    /// Upper bound on the smallest `|eigenvalue|` divided by an operator-norm estimate.
    pub margin: f64,
    /// Kernel components of the right-hand side (largest `|mean_μ|`-type defect), zero unless `s0 = 0`.
    pub compat_defect: f64,
}

/// `Δ_g f = (1/sqrt g) D_i (sqrt g g^ij D_j f)` with the central stencil `D`.
pub fn laplace_beltrami(g: &MetricField, f: &TensorField, stencil: &Stencil) -> TensorField {
    assert_eq!(f.rank(), 0);
    let mut out = vec![0.0; f.data().len()];
    apply_laplacian(g, stencil, f.data(), &mut out);
    TensorField::from_data(g.grid(), 0, Symmetry::None, out)
}

pub(crate) fn apply_laplacian(g: &MetricField, stencil: &Stencil, x: &[f64], out: &mut [f64]) {
    let grid = g.grid();
    let n = grid.dim();
    let active = grid.active_axes();
    let sd = g.sqrt_det();
    let deriv = |data: &[f64], stride: usize, comp: usize, p: usize, a: usize| -> f64 {
        let inv_h = 1.0 / grid.spacing()[a];
        let mut acc = 0.0;
        for (k, &w) in stencil.weights().iter().enumerate() {
            let off = (k + 1) as isize;
            let ip = grid.neighbor(p, a, off);
            let im = grid.neighbor(p, a, -off);
            acc += w * (data[ip * stride + comp] - data[im * stride + comp]);
        }
        acc * inv_h
    };
    let flux = par_map_points(grid.npoints(), n, |p, fl| {
        let mut df = [0.0; 8];
        for &a in &active {
            df[a] = deriv(x, 1, 0, p, a);
        }
        let ginv = g.inv_at(p);
        for i in 0..n {
            let mut acc = 0.0;
            for &j in &active {
                acc += ginv[i * n + j] * df[j];
            }
            fl[i] = sd[p] * acc;
        }
    });
    out.par_iter_mut().enumerate().for_each(|(p, o)| {
        let mut acc = 0.0;
        for &a in &active {
            acc += deriv(&flux, n, a, p, a);
        }
        *o = acc / sd[p];
    });
}

/// `(n-1) Δ_g + s0`, self-adjoint in the `sqrt(det g)`-weighted inner product.
pub struct EllipticOperator<'a> {
    g: &'a MetricField,
    s0: f64,
    stencil: Stencil,
    weights: Vec<f64>,
}

impl<'a> EllipticOperator<'a> {
    pub fn new(g: &'a MetricField, s0: f64, stencil: Stencil) -> Self {
        let weights = g.sqrt_det().to_vec();
        Self { g, s0, stencil, weights }
    }

    /// Positive diagonal used for Jacobi preconditioning.
    pub fn jacobi_diagonal(&self) -> Vec<f64> {
        let grid = self.g.grid();
        let n = grid.dim();
        let c: f64 = self.stencil.weights().iter().map(|w| 2.0 * w * w).sum();
        let active = grid.active_axes();
        (0..grid.npoints())
            .map(|p| {
                let ginv = self.g.inv_at(p);
                let lap: f64 = active.iter().map(|&a| ginv[a * n + a] * c / grid.spacing()[a].powi(2)).sum();
                (n as f64 - 1.0) * lap + self.s0.abs()
            })
            .collect()
    }

    /// `(n-1) max λ(g^{-1}) sum_a (max symbol / h_a)^2 + |s0|`, an upper bound on the operator norm.
    pub fn norm_estimate(&self) -> f64 {
        let grid = self.g.grid();
        let smax = self.stencil.symbol_max();
        let sum: f64 = grid.active_axes().iter().map(|&a| (smax / grid.spacing()[a]).powi(2)).sum();
        (grid.dim() as f64 - 1.0) * self.g.max_inverse_eigenvalue() * sum + self.s0.abs()
    }
}

impl WeightedOperator for EllipticOperator<'_> {
    fn len(&self) -> usize {
        self.weights.len()
    }

    fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        apply_laplacian(self.g, &self.stencil, x, out);
        let c = self.g.dim() as f64 - 1.0;
        out.par_iter_mut().zip(x.par_iter()).for_each(|(o, xi)| *o = c * *o + self.s0 * xi);
    }
}

/// Kernel of the discrete Laplacian: products of `(-1)^{i_a}` over subsets of the
/// even-sized active axes (the empty product is the constant). Orthonormal in `<,>_μ`.
pub fn laplacian_kernel_basis(g: &MetricField) -> Vec<Vec<f64>> {
    let grid = g.grid();
    let even: Vec<usize> = grid.active_axes().into_iter().filter(|&a| grid.sizes()[a] % 2 == 0).collect();
    let w = g.sqrt_det();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for mask in 0..(1usize << even.len()) {
        let mut v: Vec<f64> = (0..grid.npoints())
            .map(|p| {
                let idx = grid.multi_index(p);
                let parity: usize = even.iter().enumerate().filter(|(b, _)| mask >> b & 1 == 1).map(|(_, &a)| idx[a]).sum();
                if parity % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect();
        for q in &basis {
            let c = wdot(w, q, &v);
            v.iter_mut().zip(q).for_each(|(vi, qi)| *vi -= c * qi);
        }
        let nrm = wnorm(w, &v);
        v.iter_mut().for_each(|x| *x /= nrm);
        basis.push(v);
    }
    basis
}

/// Deterministic smooth start vector: a fixed combination of Fourier modes with
/// `|k_a| <= 2` on the active axes, excluding the constant mode.
pub fn probe_vector(g: &MetricField) -> Vec<f64> {
    let grid = g.grid();
    let active = grid.active_axes();
    let kmax: i64 = 2;
    let nmodes = (2 * kmax + 1).pow(active.len() as u32);
    let mut modes = Vec::new();
    for m in 0..nmodes {
        let mut k = vec![0i64; grid.dim()];
        let mut r = m;
        for &a in &active {
            k[a] = (r % (2 * kmax + 1)) as i64 - kmax;
            r /= 2 * kmax + 1;
        }
        if k.iter().all(|&v| v == 0) {
            continue;
        }
        // Fixed pseudo-random phase and weight from the mode index.
        let h = (m as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let phase = (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 * PI;
        let weight = 0.5 + ((h >> 3) % 1000) as f64 / 1000.0;
        modes.push((k, phase, weight));
    }
    (0..grid.npoints())
        .map(|p| {
            let x = grid.coords(p);
            modes
                .iter()
                .map(|(k, ph, wt)| {
                    let arg: f64 = (0..grid.dim()).map(|a| 2.0 * PI * k[a] as f64 * x[a] / grid.periods()[a]).sum();
                    wt * (arg + ph).cos()
                })
                .sum()
        })
        .collect()
}

/// Inverse of `scale Δ_ḡ + shift` by FFT, where `ḡ` is the `μ`-mean of the inverse metric
/// and `Δ_ḡ` uses the same first-derivative stencil as [`apply_laplacian`].
///
/// Applied as `y = W^{-1/2} F^{-1} |τ|^{-1} F W^{1/2} r` with `W = sqrt(det g)` and `τ` the
/// Fourier symbol, so `W M^{-1}` is symmetric positive definite even when the operator
/// is indefinite. Zero symbols (kernel modes) get the smallest nonzero `|τ|`.
pub struct SpectralPreconditioner {
    grid: Arc<Grid>,
    /// Per active axis: the axis, its FFT pair and the first index of every grid line along it.
    axes: Vec<(usize, Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>, Vec<usize>)>,
    inv_symbol: Vec<f64>,
    sqrt_w: Vec<f64>,
}

impl SpectralPreconditioner {
    pub fn new(g: &MetricField, stencil: &Stencil, scale: f64, shift: f64) -> Self {
        let grid = g.grid().clone();
        let n = grid.dim();
        let np = grid.npoints();
        let w = g.sqrt_det();
        let vol = crate::mesh::deterministic_sum(w);
        let mut gbar = vec![0.0; n * n];
        for (c, gb) in gbar.iter_mut().enumerate() {
            *gb = crate::mesh::deterministic_sum_by(np, |p| w[p] * g.inv_at(p)[c]) / vol;
        }
        let active = grid.active_axes();
        let mut planner = FftPlanner::<f64>::new();
        let axes = active
            .iter()
            .map(|&a| {
                let len = grid.sizes()[a];
                let starts = (0..np).filter(|&p| grid.multi_index(p)[a] == 0).collect();
                (a, planner.plan_fft_forward(len), planner.plan_fft_inverse(len), starts)
            })
            .collect();
        let mut tau: Vec<f64> = (0..np)
            .map(|q| {
                let k = grid.multi_index(q);
                let mut s = [0.0; 8];
                for &a in &active {
                    let theta = 2.0 * PI * k[a] as f64 / grid.sizes()[a] as f64;
                    s[a] = stencil.symbol(theta) / grid.spacing()[a];
                }
                let mut quad = 0.0;
                for &a in &active {
                    for &b in &active {
                        quad += gbar[a * n + b] * s[a] * s[b];
                    }
                }
                (shift - scale * quad).abs()
            })
            .collect();
        let tmax = tau.iter().fold(0.0_f64, |m, &t| m.max(t));
        let tmin = tau.iter().filter(|&&t| t > 1e-12 * tmax).fold(f64::INFINITY, |m, &t| m.min(t));
        let floor = if tmin.is_finite() { tmin } else { 1.0 };
        tau.iter_mut().for_each(|t| {
            if *t <= 1e-12 * tmax {
                *t = floor
            }
        });
        Self {
            grid,
            axes,
            inv_symbol: tau.iter().map(|t| 1.0 / t).collect(),
            sqrt_w: w.iter().map(|v| v.sqrt()).collect(),
        }
    }

    fn transform(&self, data: &mut [Complex<f64>], inverse: bool) {
        for (a, fwd, inv, starts) in &self.axes {
            let fft = if inverse { inv } else { fwd };
            let len = self.grid.sizes()[*a];
            let stride = if len > 1 { self.grid.neighbor(0, *a, 1) } else { 1 };
            let mut line = vec![Complex::new(0.0, 0.0); len];
            let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
            for &s in starts {
                for (j, v) in line.iter_mut().enumerate() {
                    *v = data[s + j * stride];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for (j, v) in line.iter().enumerate() {
                    data[s + j * stride] = *v;
                }
            }
        }
    }
}

impl Preconditioner for SpectralPreconditioner {
    fn apply(&self, r: &[f64], y: &mut [f64]) {
        let mut z: Vec<Complex<f64>> = r.iter().zip(&self.sqrt_w).map(|(ri, s)| Complex::new(ri * s, 0.0)).collect();
        self.transform(&mut z, false);
        z.iter_mut().zip(&self.inv_symbol).for_each(|(v, d)| *v *= *d);
        self.transform(&mut z, true);
        let norm = 1.0 / r.len() as f64;
        y.iter_mut().zip(z.iter().zip(&self.sqrt_w)).for_each(|(yi, (v, s))| *yi = v.re * norm / s);
    }
}

/// Exact eigenvalue of the discrete `-(n-1) Δ` on a flat grid for the Fourier mode `wave`.
pub fn flat_laplacian_eigenvalue(grid: &crate::mesh::Grid, stencil: &Stencil, wave: &[i64]) -> f64 {
    let sum: f64 = (0..grid.dim())
        .filter(|&a| grid.sizes()[a] > 1)
        .map(|a| {
            let theta = 2.0 * PI * wave[a] as f64 / grid.sizes()[a] as f64;
            (stencil.symbol(theta) / grid.spacing()[a]).powi(2)
        })
        .sum();
    (grid.dim() as f64 - 1.0) * sum
}

/// Relative invertibility margin of `(n-1) Δ_g + s0` from a Lanczos probe, optionally
/// tightened by a known pair `(||L p||, ||p||)`.
pub fn invertibility_margin(g: &MetricField, s0: f64, stencil: &Stencil, steps: usize, kernel: &[Vec<f64>]) -> f64 {
    let op = EllipticOperator::new(g, s0, stencil.clone());
    let start = probe_vector(g);
    let rep = lanczos(&op, &start, steps, kernel);
    rep.smallest_modulus_bound() / op.norm_estimate()
}

/// Assembles `-(n-2) A^ij B_ij + ∇^i ∇^j B_ij`, the second term as the divergence of
/// the covector `D_i = g^jb ∇_b B_ij`.
pub fn pressure_rhs(bundle: &CurvatureBundle) -> TensorField {
    let g = &bundle.metric;
    let grid = g.grid().clone();
    let n = grid.dim();
    let div_b = map_covariant(&bundle.b, &bundle.gamma, &bundle.stencil, n, |p, nb, out| {
        // nb[b][i][j] = ∇_b B_ij
        let ginv = g.inv_at(p);
        for i in 0..n {
            let mut acc = 0.0;
            for b in 0..n {
                for j in 0..n {
                    acc += ginv[j * n + b] * nb[(b * n + i) * n + j];
                }
            }
            out[i] = acc;
        }
    });
    let div_b = TensorField::from_data(&grid, 1, Symmetry::None, div_b);
    let data = map_covariant(&div_b, &bundle.gamma, &bundle.stencil, 1, |p, nd, out| {
        // nd[a][i] = ∇_a D_i
        let ginv = g.inv_at(p);
        let dd: f64 = (0..n * n).map(|c| ginv[c] * nd[c]).sum();
        let mut a_up = [0.0; 64];
        raise_pair_into(n, ginv, bundle.a.at(p), &mut a_up[..n * n]);
        let ab: f64 = (0..n * n).map(|c| a_up[c] * bundle.b.at(p)[c]).sum();
        out[0] = dd - (n as f64 - 2.0) * ab;
    });
    TensorField::from_data(&grid, 0, Symmetry::None, data)
}

pub fn solve_pressure(problem: &EllipticProblem) -> Result<PressureSolution, PressureError> {
    let g = problem.metric;
    let grid = g.grid();
    let opts = &problem.options;
    assert!(grid.same_as(problem.rhs.grid()), "right-hand side lives on a different grid");
    let op = EllipticOperator::new(g, problem.s0, problem.stencil.clone());
    let w = op.weights().to_vec();
    let mut rhs = problem.rhs.data().to_vec();

    let kernel = if problem.s0 == 0.0 { laplacian_kernel_basis(g) } else { Vec::new() };
    let volume: f64 = crate::mesh::deterministic_sum(&w);
    let mut compat_defect: f64 = 0.0;
    for q in &kernel {
        let c = wdot(&w, q, &rhs);
        // For the normalized constant q = 1/sqrt(vol) this is |mean_μ(rhs)|.
        compat_defect = compat_defect.max(c.abs() / volume.sqrt());
        rhs.iter_mut().zip(q).for_each(|(r, qi)| *r -= c * qi);
    }
    if compat_defect > opts.compat_tol {
        return Err(PressureError::IncompatibleRHS { defect: compat_defect, tolerance: opts.compat_tol });
    }

    let norm_est = op.norm_estimate();
    let mut eig_bound = f64::INFINITY;
    if opts.probe {
        let rep = lanczos(&op, &probe_vector(g), opts.probe_steps, &kernel);
        eig_bound = rep.smallest_modulus_bound();
        let margin = eig_bound / norm_est;
        if margin < opts.eps_inv {
            return Err(PressureError::NearSingularOperator { margin, floor: opts.eps_inv });
        }
    }

    let bnorm = wnorm(&w, &rhs);
    if bnorm == 0.0 {
        return Ok(PressureSolution {
            p: TensorField::constant_scalar(grid, 0.0),
            iterations: 0,
            residual: 0.0,
            margin: eig_bound / norm_est,
            compat_defect,
        });
    }

    let mut x = match problem.initial_guess {
        Some(p0) => p0.data().to_vec(),
        None => vec![0.0; rhs.len()],
    };
    for q in &kernel {
        let c = wdot(&w, q, &x);
        x.iter_mut().zip(q).for_each(|(xi, qi)| *xi -= c * qi);
    }
    let precond: Option<Box<dyn Preconditioner>> = match opts.preconditioner {
        PreconditionerKind::None => None,
        PreconditionerKind::Jacobi => Some(Box::new(op.jacobi_diagonal())),
        PreconditionerKind::Spectral => {
            Some(Box::new(SpectralPreconditioner::new(g, &problem.stencil, g.dim() as f64 - 1.0, problem.s0)))
        }
    };
    let max_iter = opts.max_iter.unwrap_or(10 * grid.npoints());
    let rep = minres(&op, &rhs, &mut x, precond.as_deref(), opts.tol, max_iter);
    if !rep.converged {
        return Err(PressureError::NoConvergence { iterations: rep.iterations, residual: rep.residual / bnorm });
    }
    for q in &kernel {
        let c = wdot(&w, q, &x);
        x.iter_mut().zip(q).for_each(|(xi, qi)| *xi -= c * qi);
    }
    let pnorm = wnorm(&w, &x);
    if pnorm > 0.0 {
        eig_bound = eig_bound.min(bnorm / pnorm);
    }
    let margin = eig_bound / norm_est;
    if margin < opts.eps_inv {
        return Err(PressureError::NearSingularOperator { margin, floor: opts.eps_inv });
    }
    Ok(PressureSolution {
        p: TensorField::from_data(grid, 0, Symmetry::None, x),
        iterations: rep.iterations,
        residual: rep.residual / bnorm,
        margin,
        compat_defect,
    })
}
