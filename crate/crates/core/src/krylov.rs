//! Krylov methods for operators that are self-adjoint in a weighted inner product
//! `<x, y>_w = sum_i w_i x_i y_i`.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::mesh::deterministic_sum_by;

/// Self-adjoint linear operator on `R^len` with respect to the weights returned by `weights`.
pub trait WeightedOperator: Sync {
    fn len(&self) -> usize;
    fn weights(&self) -> &[f64];
    fn apply(&self, x: &[f64], out: &mut [f64]);
}

pub fn wdot(w: &[f64], x: &[f64], y: &[f64]) -> f64 {
    deterministic_sum_by(x.len(), |i| w[i] * x[i] * y[i])
}

pub fn wnorm(w: &[f64], x: &[f64]) -> f64 {
    wdot(w, x, x).max(0.0).sqrt()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    y.par_iter_mut().zip(x.par_iter()).for_each(|(yi, xi)| *yi += a * xi);
}

/// Preconditioner `y = M^{-1} r`; `W M^{-1}` must be symmetric positive definite, with
/// `W` the diagonal of weights.
pub trait Preconditioner: Sync {
    fn apply(&self, r: &[f64], y: &mut [f64]);

    /// A constant `c` with `||r||_w <= c ||r||_{M^{-1}}` for all `r`, if one is cheap and tight.
    fn norm_bound(&self) -> Option<f64> {
        None
    }
}

/// Diagonal `M`, one positive entry per unknown.
impl Preconditioner for Vec<f64> {
    fn apply(&self, r: &[f64], y: &mut [f64]) {
        y.par_iter_mut().zip(r.par_iter().zip(self.par_iter())).for_each(|(yi, (ri, mi))| *yi = ri / mi);
    }

    fn norm_bound(&self) -> Option<f64> {
        Some(self.iter().fold(0.0_f64, |a, &v| a.max(v)).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinresReport {
    pub iterations: usize,
    /// True weighted residual norm `||b - A x||_w` at exit.
    pub residual: f64,
    pub converged: bool,
}

/// Preconditioned MINRES (Paige–Saunders) in the weighted inner product.
///
/// `precond` must be symmetric positive definite in the same inner product (see
/// [`Preconditioner`]). Iterates until the true residual satisfies
/// `||b - A x||_w <= tol * ||b||_w`, restarting from the current iterate when the
/// recurrence estimate and the true residual drift apart.
pub fn minres<A: WeightedOperator>(
    op: &A,
    b: &[f64],
    x: &mut [f64],
    precond: Option<&dyn Preconditioner>,
    tol: f64,
    max_iter: usize,
) -> MinresReport {
    let w = op.weights();
    let bnorm = wnorm(w, b);
    let n = op.len();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return MinresReport { iterations: 0, residual: 0.0, converged: true };
    }
    let target = tol * bnorm;
    let mut total = 0;
    let mut ax = vec![0.0; n];
    loop {
        op.apply(x, &mut ax);
        let r0: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let rnorm = wnorm(w, &r0);
        if rnorm <= target {
            return MinresReport { iterations: total, residual: rnorm, converged: true };
        }
        if total >= max_iter {
            return MinresReport { iterations: total, residual: rnorm, converged: false };
        }
        let used = minres_cycle(op, &r0, x, precond, 0.5 * target, max_iter - total);
        total += used.max(1);
    }
}

/// One MINRES cycle solving `A dx = r0` and adding `dx` to `x`; returns iterations used.
fn minres_cycle<A: WeightedOperator>(
    op: &A,
    r0: &[f64],
    x: &mut [f64],
    precond: Option<&dyn Preconditioner>,
    target: f64,
    max_iter: usize,
) -> usize {
    let n = op.len();
    let w = op.weights();
    let apply_m = |r: &[f64]| -> Vec<f64> {
        match precond {
            Some(m) => {
                let mut y = vec![0.0; r.len()];
                m.apply(r, &mut y);
                y
            }
            None => r.to_vec(),
        }
    };
    let mut r1 = r0.to_vec();
    let mut y = apply_m(&r1);
    let beta1 = wdot(w, &r1, &y).max(0.0).sqrt();
    if beta1 == 0.0 {
        return 0;
    }
    let mut r2 = r1.clone();
    let (mut oldb, mut beta) = (0.0, beta1);
    let (mut dbar, mut epsln, mut phibar) = (0.0, 0.0, beta1);
    let (mut cs, mut sn) = (-1.0, 0.0);
    let mut wv = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut av = vec![0.0; n];
    // `phibar` estimates the residual in the M^{-1}-weighted norm. Without a known bound
    // the ratio of the two norms at the start of the cycle stands in; the caller checks
    // the true residual and restarts if the estimate was optimistic.
    let norm_factor = match precond {
        None => 1.0,
        Some(m) => m.norm_bound().unwrap_or_else(|| wnorm(w, r0) / beta1),
    };
    for itn in 1..=max_iter {
        let s = 1.0 / beta;
        v.par_iter_mut().zip(y.par_iter()).for_each(|(vi, yi)| *vi = s * yi);
        op.apply(&v, &mut av);
        if itn >= 2 {
            axpy(-beta / oldb, &r1, &mut av);
        }
        let alfa = wdot(w, &v, &av);
        axpy(-alfa / beta, &r2, &mut av);
        std::mem::swap(&mut r1, &mut r2);
        std::mem::swap(&mut r2, &mut av);
        y = apply_m(&r2);
        oldb = beta;
        beta = wdot(w, &r2, &y).max(0.0).sqrt();
        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = gbar.hypot(beta).max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;
        let denom = 1.0 / gamma;
        // w_new = (v - oldeps * w1 - delta * w2) / gamma with w1 = old w2, w2 = old w
        let w1 = std::mem::replace(&mut w2, wv.clone());
        wv.par_iter_mut()
            .zip(v.par_iter())
            .zip(w1.par_iter().zip(w2.par_iter()))
            .for_each(|((wi, vi), (w1i, w2i))| *wi = (vi - oldeps * w1i - delta * w2i) * denom);
        axpy(phi, &wv, x);
        if beta == 0.0 {
            return itn;
        }
        if phibar * norm_factor <= target {
            return itn;
        }
    }
    max_iter
}

/// Ritz values of a Lanczos run and their residual bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct LanczosReport {
    pub ritz_values: Vec<f64>,
    pub residuals: Vec<f64>,
    pub steps: usize,
}

impl LanczosReport {
    /// Upper bound on the smallest eigenvalue modulus: each `(theta, res)` pair brackets an
    /// eigenvalue in `[theta - res, theta + res]`.
    pub fn smallest_modulus_bound(&self) -> f64 {
        self.ritz_values
            .iter()
            .zip(&self.residuals)
            .map(|(t, r)| t.abs() + r)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn largest_modulus(&self) -> f64 {
        self.ritz_values.iter().fold(0.0, |m, t| m.max(t.abs()))
    }
}

/// Lanczos with full reorthogonalization in the weighted inner product.
///
/// `deflate` lists vectors (orthonormal in the weighted product) that are projected out
/// of every Krylov vector.
pub fn lanczos<A: WeightedOperator>(op: &A, start: &[f64], steps: usize, deflate: &[Vec<f64>]) -> LanczosReport {
    let w = op.weights();
    let n = op.len();
    let project = |v: &mut [f64], basis: &[Vec<f64>]| {
        for q in basis {
            let c = wdot(w, q, v);
            axpy(-c, q, v);
        }
    };
    let mut q0 = start.to_vec();
    project(&mut q0, deflate);
    let nrm = wnorm(w, &q0);
    if nrm == 0.0 {
        return LanczosReport { ritz_values: vec![], residuals: vec![], steps: 0 };
    }
    q0.iter_mut().for_each(|v| *v /= nrm);
    let mut basis: Vec<Vec<f64>> = vec![q0];
    let mut alphas = Vec::new();
    let mut betas = Vec::new();
    let mut z = vec![0.0; n];
    let mut last_beta = 0.0;
    for j in 0..steps.min(n) {
        op.apply(&basis[j], &mut z);
        project(&mut z, deflate);
        let a = wdot(w, &basis[j], &z);
        alphas.push(a);
        // Two passes of classical Gram–Schmidt against the whole basis.
        for _ in 0..2 {
            for q in &basis {
                let c = wdot(w, q, &z);
                axpy(-c, q, &mut z);
            }
            project(&mut z, deflate);
        }
        let b = wnorm(w, &z);
        last_beta = b;
        if j + 1 == steps.min(n) || b <= 1e-14 * a.abs().max(1.0) {
            break;
        }
        betas.push(b);
        basis.push(z.iter().map(|v| v / b).collect());
    }
    let m = alphas.len();
    let t = DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            alphas[i]
        } else if i + 1 == j {
            betas[i]
        } else if j + 1 == i {
            betas[j]
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(t);
    let ritz_values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let residuals: Vec<f64> = (0..m).map(|i| (last_beta * eig.eigenvectors[(m - 1, i)]).abs()).collect();
    LanczosReport { ritz_values, residuals, steps: m }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmresReport {
    pub iterations: usize,
    /// `||b - A x||_w / ||b||_w`, recomputed at exit.
    pub relative_residual: f64,
    /// The recomputed residual is within `2 rtol` (rounding in the Arnoldi recurrence).
    pub converged: bool,
}

/// Restarted GMRES for a general operator, right-preconditioned, in the `w`-weighted
/// inner product. Stops when the recurrence residual drops below `rtol ||b||_w`.
pub fn gmres<A, M>(
    w: &[f64],
    mut apply: A,
    mut precond: M,
    b: &[f64],
    x: &mut [f64],
    rtol: f64,
    restart: usize,
    max_iter: usize,
) -> GmresReport
where
    A: FnMut(&[f64], &mut [f64]),
    M: FnMut(&[f64], &mut [f64]),
{
    let n = b.len();
    let bnorm = wnorm(w, b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return GmresReport { iterations: 0, relative_residual: 0.0, converged: true };
    }
    let m = restart.max(1);
    let mut ax = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut iterations = 0;
    while iterations < max_iter {
        apply(x, &mut ax);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let beta = wnorm(w, &r);
        let mut rel = beta / bnorm;
        if rel <= rtol {
            return GmresReport { iterations, relative_residual: rel, converged: true };
        }
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|ri| ri / beta).collect()];
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut gvec = vec![0.0; m + 1];
        gvec[0] = beta;
        let mut k = 0;
        while k < m && iterations < max_iter {
            iterations += 1;
            precond(&v[k], &mut z);
            let mut q = vec![0.0; n];
            apply(&z, &mut q);
            for j in 0..=k {
                let hj = wdot(w, &q, &v[j]);
                h[j][k] = hj;
                q.iter_mut().zip(&v[j]).for_each(|(qi, vi)| *qi -= hj * vi);
            }
            let hn = wnorm(w, &q);
            h[k + 1][k] = hn;
            for j in 0..k {
                let t = cs[j] * h[j][k] + sn[j] * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t;
            }
            let d = h[k][k].hypot(h[k + 1][k]);
            (cs[k], sn[k]) = if d == 0.0 { (1.0, 0.0) } else { (h[k][k] / d, h[k + 1][k] / d) };
            h[k][k] = d;
            h[k + 1][k] = 0.0;
            gvec[k + 1] = -sn[k] * gvec[k];
            gvec[k] *= cs[k];
            k += 1;
            rel = gvec[k].abs() / bnorm;
            if rel <= rtol || hn == 0.0 {
                break;
            }
            v.push(q.iter().map(|qi| qi / hn).collect());
        }
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let s: f64 = (i + 1..k).map(|j| h[i][j] * y[j]).sum();
            y[i] = (gvec[i] - s) / h[i][i];
        }
        let mut u = vec![0.0; n];
        for (j, yj) in y.iter().enumerate() {
            u.iter_mut().zip(&v[j]).for_each(|(ui, vi)| *ui += yj * vi);
        }
        precond(&u, &mut z);
        x.iter_mut().zip(&z).for_each(|(xi, zi)| *xi += zi);
        if rel <= rtol {
            break;
        }
    }
    apply(x, &mut ax);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let rel_true = wnorm(w, &r) / bnorm;
    GmresReport { iterations, relative_residual: rel_true, converged: rel_true <= 2.0 * rtol }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Diagonal test operator with non-uniform weights.
    struct Diag {
        d: Vec<f64>,
        w: Vec<f64>,
    }

    impl WeightedOperator for Diag {
        fn len(&self) -> usize {
            self.d.len()
        }
        fn weights(&self) -> &[f64] {
            &self.w
        }
        fn apply(&self, x: &[f64], out: &mut [f64]) {
            for i in 0..x.len() {
                out[i] = self.d[i] * x[i];
            }
        }
    }

    /// 1-D periodic Laplacian plus shift, symmetric with unit weights.
    struct Lap {
        shift: f64,
        w: Vec<f64>,
    }

    impl WeightedOperator for Lap {
        fn len(&self) -> usize {
            self.w.len()
        }
        fn weights(&self) -> &[f64] {
            &self.w
        }
        fn apply(&self, x: &[f64], out: &mut [f64]) {
            let n = x.len();
            for i in 0..n {
                out[i] = x[(i + 1) % n] - 2.0 * x[i] + x[(i + n - 1) % n] + self.shift * x[i];
            }
        }
    }

    #[test]
    fn minres_solves_indefinite_system() {
        let op = Lap { shift: 1.3, w: vec![1.0; 64] };
        let b: Vec<f64> = (0..64).map(|i| ((i * 7 % 13) as f64).sin()).collect();
        let mut x = vec![0.0; 64];
        let rep = minres(&op, &b, &mut x, None, 1e-12, 2000);
        assert!(rep.converged);
        let mut ax = vec![0.0; 64];
        op.apply(&x, &mut ax);
        let err: f64 = ax.iter().zip(&b).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err <= 1e-12 * wnorm(&op.w, &b) * 1.0001);
    }

    #[test]
    fn minres_weighted_and_preconditioned() {
        let d: Vec<f64> = (0..50).map(|i| if i % 2 == 0 { 1.0 + i as f64 } else { -2.0 - i as f64 }).collect();
        let w: Vec<f64> = (0..50).map(|i| 0.5 + (i % 5) as f64).collect();
        let op = Diag { d: d.clone(), w };
        let b: Vec<f64> = (0..50).map(|i| 1.0 + i as f64 * 0.1).collect();
        let m: Vec<f64> = d.iter().map(|v| v.abs()).collect();
        for pc in [None, Some(&m as &dyn Preconditioner)] {
            let mut x = vec![0.0; 50];
            let rep = minres(&op, &b, &mut x, pc, 1e-10, 500);
            assert!(rep.converged, "{rep:?}");
            for i in 0..50 {
                assert!((x[i] - b[i] / d[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let op = Lap { shift: -1.0, w: vec![1.0; 8] };
        let mut x = vec![1.0; 8];
        let rep = minres(&op, &[0.0; 8], &mut x, None, 1e-10, 10);
        assert!(rep.converged);
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gmres_solves_nonsymmetric_system() {
        let n = 40;
        let apply = |x: &[f64], out: &mut [f64]| {
            for i in 0..n {
                out[i] = (2.0 + i as f64 / n as f64) * x[i] + 0.7 * x[(i + 1) % n] - 0.2 * x[(i + 3) % n];
            }
        };
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let w = vec![1.0; n];
        for (restart, jacobi) in [(50, false), (5, true)] {
            let mut x = vec![0.0; n];
            let rep = gmres(
                &w,
                apply,
                |r: &[f64], z: &mut [f64]| {
                    for i in 0..n {
                        z[i] = if jacobi { r[i] / (2.0 + i as f64 / n as f64) } else { r[i] };
                    }
                },
                &b,
                &mut x,
                1e-12,
                restart,
                500,
            );
            assert!(rep.converged, "{rep:?}");
            let mut ax = vec![0.0; n];
            apply(&x, &mut ax);
            let err = ax.iter().zip(&b).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "{err}");
        }
    }

    #[test]
    fn lanczos_brackets_eigenvalues() {
        let d: Vec<f64> = (0..40).map(|i| i as f64 - 10.3).collect();
        let op = Diag { d, w: vec![1.0; 40] };
        let start = vec![1.0; 40];
        let rep = lanczos(&op, &start, 40, &[]);
        assert!((rep.smallest_modulus_bound() - 0.3).abs() < 1e-8);
        assert!((rep.largest_modulus() - 28.7).abs() < 1e-8);
        let short = lanczos(&op, &start, 8, &[]);
        assert!(short.smallest_modulus_bound() >= 0.3 - 1e-12);
    }
}
