//! Curvature pipeline on a grid metric: Christoffel symbols, Riemann, Ricci, scalar,
//! Schouten, Weyl, Cotton and Bach tensors, plus covariant derivatives and the
//! first variation of the Riemann tensor.
//!
//! Conventions: `R^l_ijk = d_i G^l_jk - d_j G^l_ik + G^l_ip G^p_jk - G^l_jp G^p_ik`,
//! `R_ijkl = g_lm R^m_ijk` (so `R_ijji` is sectional curvature), `R_ij = g^kl R_iklj`.

use std::sync::Arc;

use crate::mesh::{
    gradient_at, norm_sq_at, par_map_points, par_map_points_scratch, symmetrize2, Grid, MetricField, Stencil,
    Symmetry, TensorField,
};

#[inline]
fn idx4(n: usize, i: usize, j: usize, k: usize, l: usize) -> usize {
    ((i * n + j) * n + k) * n + l
}

/// Covariant derivative of a covariant tensor at one point, derivative index first.
///
/// `out` needs `n * ncomp` slots.
pub(crate) fn covariant_at(t: &TensorField, gamma: &TensorField, stencil: &Stencil, point: usize, out: &mut [f64]) {
    let n = t.grid().dim();
    let rank = t.rank();
    let nc = t.ncomp();
    gradient_at(t, stencil, point, out);
    if rank == 0 {
        return;
    }
    let gam = gamma.at(point);
    let tp = t.at(point);
    for a in 0..n {
        let o = &mut out[a * nc..(a + 1) * nc];
        for slot in 0..rank {
            let stride = n.pow((rank - 1 - slot) as u32);
            let block = n * stride;
            for outer in (0..nc).step_by(block) {
                for i in 0..n {
                    let gcol = &gam[a * n + i..];
                    for inner in 0..stride {
                        let base = outer + inner;
                        let mut acc = 0.0;
                        for k in 0..n {
                            acc += gcol[k * n * n] * tp[base + k * stride];
                        }
                        o[base + i * stride] -= acc;
                    }
                }
            }
        }
    }
}

/// Applies `f(point, nabla_T, out)` at every point without storing `nabla T`.
pub(crate) fn map_covariant<F>(
    t: &TensorField,
    gamma: &TensorField,
    stencil: &Stencil,
    out_ncomp: usize,
    f: F,
) -> Vec<f64>
where
    F: Fn(usize, &[f64], &mut [f64]) + Sync,
{
    let grid = t.grid();
    let scratch = grid.dim() * t.ncomp();
    par_map_points_scratch(grid.npoints(), out_ncomp, scratch, |p, out, s| {
        covariant_at(t, gamma, stencil, p, s);
        f(p, s, out);
    })
}

/// Levi-Civita covariant derivative of a rank-`(0,r)` field; rank `r + 1`, derivative index first.
pub fn covariant_derivative(t: &TensorField, gamma: &TensorField, stencil: &Stencil) -> TensorField {
    let n = t.grid().dim();
    let nc = t.ncomp();
    let data = map_covariant(t, gamma, stencil, n * nc, |_, d, out| out.copy_from_slice(d));
    TensorField::from_data(t.grid(), t.rank() + 1, Symmetry::None, data)
}

/// `G^k_ij = 1/2 g^kl (d_i g_jl + d_j g_il - d_l g_ij)`, stored as `[k][i][j]`.
pub fn christoffel(g: &MetricField, stencil: &Stencil) -> TensorField {
    let grid = g.grid().clone();
    let n = grid.dim();
    let data = par_map_points_scratch(grid.npoints(), n * n * n, n * n * n, |p, out, dg| {
        gradient_at(g.tensor(), stencil, p, dg);
        let ginv = g.inv_at(p);
        let d = |a: usize, i: usize, j: usize| dg[(a * n + i) * n + j];
        for i in 0..n {
            for j in i..n {
                for k in 0..n {
                    let mut acc = 0.0;
                    for l in 0..n {
                        acc += ginv[k * n + l] * (d(i, j, l) + d(j, i, l) - d(l, i, j));
                    }
                    out[(k * n + i) * n + j] = 0.5 * acc;
                    out[(k * n + j) * n + i] = 0.5 * acc;
                }
            }
        }
    });
    TensorField::from_data(&grid, 3, Symmetry::None, data)
}

/// Riemann tensor `R_ijkl` from the metric and its Christoffel symbols, projected onto
/// the algebraic symmetries `R_ijkl = -R_jikl = -R_ijlk = R_klij`.
pub fn riemann(g: &MetricField, gamma: &TensorField, stencil: &Stencil) -> TensorField {
    let grid = g.grid().clone();
    let n = grid.dim();
    let n3 = n * n * n;
    let n4 = n3 * n;
    let data = par_map_points_scratch(grid.npoints(), n4, 2 * n4, |p, out, scratch| {
        let (dgam, rup) = scratch.split_at_mut(n4);
        gradient_at(gamma, stencil, p, dgam);
        let gam = gamma.at(p);
        // rup[i][j][l][k] = R^l_ijk for i < j
        for i in 0..n {
            for j in i + 1..n {
                for l in 0..n {
                    let gli = &gam[(l * n + i) * n..(l * n + i + 1) * n];
                    let glj = &gam[(l * n + j) * n..(l * n + j + 1) * n];
                    for k in 0..n {
                        let mut v = dgam[i * n3 + (l * n + j) * n + k] - dgam[j * n3 + (l * n + i) * n + k];
                        for q in 0..n {
                            v += gli[q] * gam[(q * n + j) * n + k] - glj[q] * gam[(q * n + i) * n + k];
                        }
                        rup[((i * n + j) * n + l) * n + k] = v;
                    }
                }
            }
        }
        let gp = g.g_at(p);
        out.fill(0.0);
        for i in 0..n {
            for j in i + 1..n {
                let r = &rup[(i * n + j) * n * n..(i * n + j + 1) * n * n];
                for k in 0..n {
                    for l in 0..n {
                        let mut acc = 0.0;
                        for m in 0..n {
                            acc += gp[l * n + m] * r[m * n + k];
                        }
                        out[idx4(n, i, j, k, l)] = acc;
                    }
                }
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                for k in i..n {
                    let l0 = if k == i { j } else { k + 1 };
                    for l in l0..n {
                        let v = 0.25
                            * (out[idx4(n, i, j, k, l)] - out[idx4(n, i, j, l, k)] + out[idx4(n, k, l, i, j)]
                                - out[idx4(n, k, l, j, i)]);
                        for (a, b, c, d) in [(i, j, k, l), (k, l, i, j)] {
                            out[idx4(n, a, b, c, d)] = v;
                            out[idx4(n, b, a, c, d)] = -v;
                            out[idx4(n, a, b, d, c)] = -v;
                            out[idx4(n, b, a, d, c)] = v;
                        }
                    }
                }
            }
        }
    });
    TensorField::from_data(&grid, 4, Symmetry::RiemannType, data)
}

/// Ricci `R_ij = g^kl R_iklj`, scalar `S = g^ij R_ij` and Schouten
/// `A = (Rc - S g / (2(n-1))) / (n-2)`.
pub fn ricci_scalar_schouten(g: &MetricField, rm: &TensorField) -> (TensorField, TensorField, TensorField) {
    let grid = g.grid().clone();
    let n = grid.dim();
    let nf = n as f64;
    let stride = 2 * n * n + 1;
    let packed = par_map_points(grid.npoints(), stride, |p, out| {
        let r = rm.at(p);
        let ginv = g.inv_at(p);
        let gp = g.g_at(p);
        let (rc, rest) = out.split_at_mut(n * n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    for l in 0..n {
                        acc += ginv[k * n + l] * r[idx4(n, i, k, l, j)];
                    }
                }
                rc[i * n + j] = acc;
            }
        }
        symmetrize2(n, rc);
        let s: f64 = (0..n * n).map(|c| ginv[c] * rc[c]).sum();
        let (a, sv) = rest.split_at_mut(n * n);
        for c in 0..n * n {
            a[c] = (rc[c] - s * gp[c] / (2.0 * (nf - 1.0))) / (nf - 2.0);
        }
        sv[0] = s;
    });
    let np = grid.npoints();
    let mut rc = Vec::with_capacity(np * n * n);
    let mut a = Vec::with_capacity(np * n * n);
    let mut s = Vec::with_capacity(np);
    for chunk in packed.chunks(stride) {
        rc.extend_from_slice(&chunk[..n * n]);
        a.extend_from_slice(&chunk[n * n..2 * n * n]);
        s.push(chunk[2 * n * n]);
    }
    (
        TensorField::from_data(&grid, 2, Symmetry::Symmetric, rc),
        TensorField::from_data(&grid, 0, Symmetry::None, s),
        TensorField::from_data(&grid, 2, Symmetry::Symmetric, a),
    )
}

/// `W = Rm + (A_ik g_jl + A_jl g_ik - A_il g_jk - A_jk g_il)`.
pub fn weyl(g: &MetricField, rm: &TensorField, a: &TensorField) -> TensorField {
    let grid = g.grid().clone();
    let n = grid.dim();
    let data = par_map_points(grid.npoints(), n * n * n * n, |p, out| {
        let (r, ap, gp) = (rm.at(p), a.at(p), g.g_at(p));
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        out[idx4(n, i, j, k, l)] = r[idx4(n, i, j, k, l)]
                            + ap[i * n + k] * gp[j * n + l]
                            + ap[j * n + l] * gp[i * n + k]
                            - ap[i * n + l] * gp[j * n + k]
                            - ap[j * n + k] * gp[i * n + l];
                    }
                }
            }
        }
    });
    // Rm is already projected and the Schouten terms have the algebraic symmetries exactly.
    TensorField::from_data(&grid, 4, Symmetry::RiemannType, data)
}

/// `C_ijk = nabla_k A_ij - nabla_j A_ik` from `nabla A` stored as `[k][i][j]`.
pub fn cotton_from_gradient(grad_a: &TensorField) -> TensorField {
    let grid = grad_a.grid().clone();
    let n = grid.dim();
    let data = par_map_points(grid.npoints(), n * n * n, |p, out| {
        let d = grad_a.at(p);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    out[(i * n + j) * n + k] = d[(k * n + i) * n + j] - d[(j * n + i) * n + k];
                }
            }
        }
    });
    TensorField::from_data(&grid, 3, Symmetry::None, data)
}

pub fn cotton(a: &TensorField, gamma: &TensorField, stencil: &Stencil) -> TensorField {
    cotton_from_gradient(&covariant_derivative(a, gamma, stencil))
}

/// Makes `t` exactly trace-free in place (`t -= tr_g(t) g / n`) and returns the removed traces.
fn project_trace_free(g: &MetricField, t: &mut TensorField) -> TensorField {
    let grid = g.grid().clone();
    let n = grid.dim();
    let nc = n * n;
    let mut traces = vec![0.0; grid.npoints()];
    use rayon::prelude::*;
    t.data_mut().par_chunks_mut(nc).zip(traces.par_iter_mut()).enumerate().for_each(|(p, (b, tr))| {
        let ginv = g.inv_at(p);
        let gp = g.g_at(p);
        let s: f64 = (0..nc).map(|c| ginv[c] * b[c]).sum();
        for c in 0..nc {
            b[c] -= s * gp[c] / n as f64;
        }
        *tr = s;
    });
    TensorField::from_data(&grid, 0, Symmetry::None, traces)
}

/// Bach tensor from the Schouten form
/// `B_ij = g^ab nabla_a nabla_b A_ij - g^ab nabla_a nabla_i A_jb + A^kl W_iklj`.
///
/// Returns the symmetrized, trace-projected tensor and the pointwise trace that was removed.
pub fn bach_primary(
    g: &MetricField,
    gamma: &TensorField,
    grad_a: &TensorField,
    a: &TensorField,
    w: &TensorField,
    stencil: &Stencil,
) -> (TensorField, TensorField) {
    let grid = g.grid().clone();
    let n = grid.dim();
    let data = map_covariant(grad_a, gamma, stencil, n * n, |p, nna, out| {
        // nna[a][b][i][j] = nabla_a nabla_b A_ij
        let ginv = g.inv_at(p);
        let ap = a.at(p);
        let wp = w.at(p);
        let mut a_up = [0.0; 64];
        raise_pair_into(n, ginv, ap, &mut a_up[..n * n]);
        for i in 0..n {
            for j in 0..n {
                let mut v = 0.0;
                for x in 0..n {
                    for y in 0..n {
                        let gxy = ginv[x * n + y];
                        v += gxy * (nna[idx4(n, x, y, i, j)] - nna[idx4(n, x, i, j, y)]);
                        v += a_up[x * n + y] * wp[idx4(n, i, x, y, j)];
                    }
                }
                out[i * n + j] = v;
            }
        }
        symmetrize2(n, out);
    });
    let mut b = TensorField::from_data(&grid, 2, Symmetry::Symmetric, data);
    let tr = project_trace_free(g, &mut b);
    (b, tr)
}

pub(crate) fn raise_pair_into(n: usize, ginv: &[f64], t: &[f64], out: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for x in 0..n {
                let gx = ginv[i * n + x];
                if gx == 0.0 {
                    continue;
                }
                for y in 0..n {
                    acc += gx * ginv[j * n + y] * t[x * n + y];
                }
            }
            out[i * n + j] = acc;
        }
    }
}

/// Divergences of the Weyl tensor used by the Weyl form of Bach and the Cotton–Weyl identity.
pub struct WeylDivergence {
    /// `g^lm nabla_m W_lijk`.
    pub div_w: TensorField,
    /// `V_ikj = g^lb nabla_b W_iklj`.
    pub v: TensorField,
}

pub fn weyl_divergence(g: &MetricField, gamma: &TensorField, w: &TensorField, stencil: &Stencil) -> WeylDivergence {
    let grid = g.grid().clone();
    let n = grid.dim();
    let n3 = n * n * n;
    let n4 = n3 * n;
    let packed = map_covariant(w, gamma, stencil, 2 * n3, |p, nw, out| {
        // nw[m][i][j][k][l] = nabla_m W_ijkl
        let ginv = g.inv_at(p);
        let (dw, v) = out.split_at_mut(n3);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let mut d = 0.0;
                    let mut vv = 0.0;
                    for x in 0..n {
                        for y in 0..n {
                            let gxy = ginv[x * n + y];
                            if gxy == 0.0 {
                                continue;
                            }
                            // g^{lm} nabla_m W_{l i j k}: m = x, l = y
                            d += gxy * nw[x * n4 + idx4(n, y, i, j, k)];
                            // g^{lb} nabla_b W_{i k l j} with (i,k,j) = (i,j,k) here: b = x, l = y
                            vv += gxy * nw[x * n4 + idx4(n, i, j, y, k)];
                        }
                    }
                    dw[(i * n + j) * n + k] = d;
                    v[(i * n + j) * n + k] = vv;
                }
            }
        }
    });
    let mut dw = Vec::with_capacity(grid.npoints() * n3);
    let mut v = Vec::with_capacity(grid.npoints() * n3);
    for c in packed.chunks(2 * n3) {
        dw.extend_from_slice(&c[..n3]);
        v.extend_from_slice(&c[n3..]);
    }
    WeylDivergence {
        div_w: TensorField::from_data(&grid, 3, Symmetry::None, dw),
        v: TensorField::from_data(&grid, 3, Symmetry::None, v),
    }
}

/// Bach tensor from the Weyl form `(1/(n-3)) nabla^k nabla^l W_iklj + (1/(n-2)) R^kl W_iklj`,
/// symmetrized and trace-projected like [`bach_primary`].
pub fn bach_alt(
    g: &MetricField,
    gamma: &TensorField,
    rc: &TensorField,
    w: &TensorField,
    wd: &WeylDivergence,
    stencil: &Stencil,
) -> TensorField {
    let grid = g.grid().clone();
    let n = grid.dim();
    let nf = n as f64;
    let n3 = n * n * n;
    let data = map_covariant(&wd.v, gamma, stencil, n * n, |p, nv, out| {
        // nv[a][i][k][j] = nabla_a V_ikj
        let ginv = g.inv_at(p);
        let wp = w.at(p);
        let mut rc_up = [0.0; 64];
        raise_pair_into(n, ginv, rc.at(p), &mut rc_up[..n * n]);
        for i in 0..n {
            for j in 0..n {
                let mut dd = 0.0;
                let mut rw = 0.0;
                for x in 0..n {
                    for y in 0..n {
                        dd += ginv[x * n + y] * nv[x * n3 + (i * n + y) * n + j];
                        rw += rc_up[x * n + y] * wp[idx4(n, i, x, y, j)];
                    }
                }
                out[i * n + j] = dd / (nf - 3.0) + rw / (nf - 2.0);
            }
        }
        symmetrize2(n, out);
    });
    let mut b = TensorField::from_data(&grid, 2, Symmetry::Symmetric, data);
    project_trace_free(g, &mut b);
    b
}

/// Options for [`CurvatureBundle::compute`].
#[derive(Debug, Clone, Default)]
pub struct CurvatureOptions {
    pub stencil: Stencil,
    /// Also evaluate the Weyl-form Bach tensor and `div W`.
    pub weyl_form: bool,
}

impl CurvatureOptions {
    pub fn with_weyl_form(stencil: Stencil) -> Self {
        Self { stencil, weyl_form: true }
    }
}

/// All curvature objects of one metric.
#[derive(Debug, Clone)]
pub struct CurvatureBundle {
    pub metric: MetricField,
    pub stencil: Stencil,
    /// `[k][i][j]` = `G^k_ij`.
    pub gamma: TensorField,
    pub rm: TensorField,
    pub rc: TensorField,
    pub s: TensorField,
    pub a: TensorField,
    pub w: TensorField,
    pub c: TensorField,
    /// Schouten-form Bach, symmetrized and made exactly trace-free.
    pub b: TensorField,
    /// Pointwise `g^ij B_ij` before the trace projection.
    pub b_raw_trace: TensorField,
    pub b_alt: Option<TensorField>,
    pub div_w: Option<TensorField>,
}

impl CurvatureBundle {
    pub fn compute(g: &MetricField, opts: &CurvatureOptions) -> Self {
        let st = &opts.stencil;
        let gamma = christoffel(g, st);
        let rm = riemann(g, &gamma, st);
        let (rc, s, a) = ricci_scalar_schouten(g, &rm);
        let w = weyl(g, &rm, &a);
        let grad_a = covariant_derivative(&a, &gamma, st);
        let c = cotton_from_gradient(&grad_a);
        let (b, b_raw_trace) = bach_primary(g, &gamma, &grad_a, &a, &w, st);
        drop(grad_a);
        let (b_alt, div_w) = if opts.weyl_form {
            let wd = weyl_divergence(g, &gamma, &w, st);
            let balt = bach_alt(g, &gamma, &rc, &w, &wd, st);
            (Some(balt), Some(wd.div_w))
        } else {
            (None, None)
        };
        Self { metric: g.clone(), stencil: st.clone(), gamma, rm, rc, s, a, w, c, b, b_raw_trace, b_alt, div_w }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.metric.grid()
    }

    pub fn dim(&self) -> usize {
        self.metric.dim()
    }

    /// Sup of the pointwise `|C - div W / (n-3)|`, if the Weyl form was computed.
    pub fn cotton_weyl_residual(&self) -> Option<TensorField> {
        let dw = self.div_w.as_ref()?;
        let f = 1.0 / (self.dim() as f64 - 3.0);
        let mut r = self.c.axpy(-f, dw);
        r = r.with_symmetry(Symmetry::None);
        Some(crate::mesh::norm_sq_field(&r, &self.metric).map_sqrt())
    }

    /// `sup |g^ij B_ij| / sup |B|` of the stored (projected) Bach tensor.
    pub fn bach_trace_residual(&self) -> f64 {
        let g = &self.metric;
        let n = self.dim();
        let tr = (0..self.grid().npoints())
            .map(|p| (0..n * n).map(|c| g.inv_at(p)[c] * self.b.at(p)[c]).sum::<f64>().abs())
            .fold(0.0, f64::max);
        relative(tr, crate::mesh::norms(&self.b, g).sup)
    }

    /// `sup |g^ij B_ij| / sup |B|` before the trace projection: a discretization residual
    /// of the trace-free identity.
    pub fn bach_raw_trace_residual(&self) -> f64 {
        relative(self.b_raw_trace.max_abs(), crate::mesh::norms(&self.b, &self.metric).sup)
    }

    /// Pointwise `|div B - (n-4)/(n-2) C_jki R^jk|_g`, or `|div B|_g` without the Cotton term.
    pub fn bach_divergence_residual(&self, include_cotton: bool) -> TensorField {
        bach_divergence_residual(&self.metric, &self.gamma, &self.b, &self.c, &self.rc, include_cotton, &self.stencil)
    }

    /// Pointwise `|nabla^m Rm|^2` for `m = 1..=m_max`.
    pub fn rm_derivative_norms(&self, m_max: usize) -> Vec<TensorField> {
        let g = &self.metric;
        let grid = self.grid().clone();
        let n = grid.dim();
        let mut out = Vec::with_capacity(m_max);
        let mut current = self.rm.clone();
        for m in 1..=m_max {
            let rank = current.rank() + 1;
            let nc = n.pow(rank as u32);
            if m < m_max {
                let next = covariant_derivative(&current, &self.gamma, &self.stencil);
                let data = par_map_points_scratch(grid.npoints(), 1, 0, |p, o, _| {
                    let mut s = Vec::with_capacity(nc);
                    o[0] = norm_sq_at(n, rank, g.inv_at(p), next.at(p), &mut s);
                });
                out.push(TensorField::from_data(&grid, 0, Symmetry::None, data));
                current = next;
            } else {
                let data = map_covariant(&current, &self.gamma, &self.stencil, 1, |p, d, o| {
                    let mut s = Vec::with_capacity(nc);
                    o[0] = norm_sq_at(n, rank, g.inv_at(p), d, &mut s);
                });
                out.push(TensorField::from_data(&grid, 0, Symmetry::None, data));
            }
        }
        out
    }
}

impl TensorField {
    /// Pointwise square root of a non-negative scalar field.
    pub fn map_sqrt(&self) -> TensorField {
        let data = self.data().iter().map(|v| v.max(0.0).sqrt()).collect();
        TensorField::from_data(self.grid(), self.rank(), self.symmetry(), data)
    }
}

fn relative(x: f64, scale: f64) -> f64 {
    if scale == 0.0 {
        x
    } else {
        x / scale
    }
}

/// Coefficient `k` in `div B_i = k C_jki R^jk`.
pub fn bach_divergence_coefficient(n: usize) -> f64 {
    (n as f64 - 4.0) / (n as f64 - 2.0)
}

pub fn bach_divergence_residual(
    g: &MetricField,
    gamma: &TensorField,
    b: &TensorField,
    c: &TensorField,
    rc: &TensorField,
    include_cotton: bool,
    stencil: &Stencil,
) -> TensorField {
    let grid = g.grid().clone();
    let n = grid.dim();
    let coef = bach_divergence_coefficient(n);
    let data = map_covariant(b, gamma, stencil, 1, |p, nb, out| {
        // nb[k][i][j] = nabla_k B_ij
        let ginv = g.inv_at(p);
        let mut v = [0.0; 8];
        let mut rc_up = [0.0; 64];
        raise_pair_into(n, ginv, rc.at(p), &mut rc_up[..n * n]);
        let cp = c.at(p);
        for (i, vi) in v.iter_mut().enumerate().take(n) {
            let mut d = 0.0;
            for j in 0..n {
                for k in 0..n {
                    d += ginv[j * n + k] * nb[(k * n + i) * n + j];
                    if include_cotton {
                        d -= coef * cp[(j * n + k) * n + i] * rc_up[j * n + k];
                    }
                }
            }
            *vi = d;
        }
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += ginv[i * n + j] * v[i] * v[j];
            }
        }
        out[0] = s.max(0.0).sqrt();
    });
    TensorField::from_data(&grid, 0, Symmetry::None, data)
}

/// First variation of `R_ijkl` in the direction `h`:
/// `1/2 (nabla_i nabla_k h_jl - nabla_i nabla_l h_jk - nabla_j nabla_k h_il + nabla_j nabla_l h_ik)
///  + 1/2 (R_ijkp h^p_l + R_ijpl h^p_k)`.
pub fn curvature_variation(bundle: &CurvatureBundle, h: &TensorField) -> TensorField {
    let g = &bundle.metric;
    let grid = g.grid().clone();
    let n = grid.dim();
    let st = &bundle.stencil;
    let grad_h = covariant_derivative(h, &bundle.gamma, st);
    let rm = &bundle.rm;
    let data = map_covariant(&grad_h, &bundle.gamma, st, n * n * n * n, |p, nnh, out| {
        // nnh[a][b][i][j] = nabla_a nabla_b h_ij
        let ginv = g.inv_at(p);
        let hp = h.at(p);
        let r = rm.at(p);
        // hm[q][l] = h^q_l = g^{qm} h_ml
        let mut hm = [0.0; 64];
        for q in 0..n {
            for l in 0..n {
                hm[q * n + l] = (0..n).map(|m| ginv[q * n + m] * hp[m * n + l]).sum();
            }
        }
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let mut v = 0.5
                            * (nnh[idx4(n, i, k, j, l)] - nnh[idx4(n, i, l, j, k)] - nnh[idx4(n, j, k, i, l)]
                                + nnh[idx4(n, j, l, i, k)]);
                        let mut acc = 0.0;
                        for q in 0..n {
                            acc += r[idx4(n, i, j, k, q)] * hm[q * n + l] + r[idx4(n, i, j, q, l)] * hm[q * n + k];
                        }
                        v += 0.5 * acc;
                        out[idx4(n, i, j, k, l)] = v;
                    }
                }
            }
        }
    });
    TensorField::from_data(&grid, 4, Symmetry::None, data)
}

/// Covariant Hessian `nabla_i nabla_j f` of a scalar field, symmetrized.
pub fn hessian(f: &TensorField, gamma: &TensorField, stencil: &Stencil) -> TensorField {
    let grid = f.grid().clone();
    let n = grid.dim();
    let df = covariant_derivative(f, gamma, stencil);
    let data = map_covariant(&df, gamma, stencil, n * n, |_, d, out| {
        out.copy_from_slice(d);
        symmetrize2(n, out);
    });
    TensorField::from_data(&grid, 2, Symmetry::Symmetric, data)
}

/// `T_ijkl = g_jl H_ik - g_jk H_il - g_il H_jk + g_ik H_jl` with `H = nabla^2 p`.
pub fn t_tensor(g: &MetricField, gamma: &TensorField, p: &TensorField, stencil: &Stencil) -> TensorField {
    let h = hessian(p, gamma, stencil);
    t_tensor_from_hessian(g, &h)
}

pub fn t_tensor_from_hessian(g: &MetricField, h: &TensorField) -> TensorField {
    let grid = g.grid().clone();
    let n = grid.dim();
    let data = par_map_points(grid.npoints(), n * n * n * n, |pt, out| {
        let (gp, hp) = (g.g_at(pt), h.at(pt));
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        out[idx4(n, i, j, k, l)] = gp[j * n + l] * hp[i * n + k] - gp[j * n + k] * hp[i * n + l]
                            - gp[i * n + l] * hp[j * n + k]
                            + gp[i * n + k] * hp[j * n + l];
                    }
                }
            }
        }
    });
    TensorField::from_data(&grid, 4, Symmetry::None, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{Grid, StencilOrder};
    use crate::oracle::{AnalyticMetric, FourierMode, FourierSeries, MetricFamily};

    fn warped_family() -> MetricFamily {
        MetricFamily::DoublyWarped {
            split: 2,
            alpha: FourierSeries::single(vec![0, 1, 0, 0], 0.1, 0.3),
            beta: FourierSeries::single(vec![1, 0, 0, 0], 0.08, -0.4),
        }
    }

    fn warped_metric(sizes: Vec<usize>) -> MetricField {
        let grid = Grid::unit(sizes).unwrap();
        AnalyticMetric::unit(warped_family(), 4).unwrap().sample_to_grid(&grid).unwrap()
    }

    #[test]
    fn flat_metric_has_zero_curvature() {
        let grid = Grid::unit(vec![6, 5, 4, 3]).unwrap();
        let b = CurvatureBundle::compute(&MetricField::flat(&grid), &CurvatureOptions::with_weyl_form(Stencil::default()));
        for t in [&b.gamma, &b.rm, &b.rc, &b.s, &b.a, &b.w, &b.c, &b.b, b.b_alt.as_ref().unwrap()] {
            assert_eq!(t.max_abs(), 0.0);
        }
    }

    #[test]
    fn constant_diagonal_metric_has_zero_christoffel() {
        let grid = Grid::unit(vec![4, 4, 2, 2]).unwrap();
        let fam = MetricFamily::ConstantDiagonal { diagonal: vec![1.0, 2.0, 0.5, 3.0] };
        let g = AnalyticMetric::unit(fam, 4).unwrap().sample_to_grid(&grid).unwrap();
        assert_eq!(christoffel(&g, &Stencil::default()).max_abs(), 0.0);
    }

    #[test]
    fn scaling_laws() {
        let g = warped_metric(vec![12, 12, 1, 1]);
        let c = 2.5;
        let gc = g.scaled(c).unwrap();
        let opts = CurvatureOptions::default();
        let b1 = CurvatureBundle::compute(&g, &opts);
        let b2 = CurvatureBundle::compute(&gc, &opts);
        let close = |x: &TensorField, y: &TensorField, f: f64| {
            let scale = x.max_abs().max(1e-300);
            x.data().iter().zip(y.data()).all(|(a, b)| (f * a - b).abs() <= 1e-12 * scale * f.max(1.0))
        };
        assert!(close(&b1.rm, &b2.rm, c));
        assert!(close(&b1.rc, &b2.rc, 1.0));
        assert!(close(&b1.s, &b2.s, 1.0 / c));
        assert!(close(&b1.a, &b2.a, 1.0));
        assert!(close(&b1.gamma, &b2.gamma, 1.0));
    }

    #[test]
    fn bundle_algebraic_invariants() {
        let g = warped_metric(vec![16, 16, 1, 1]);
        let b = CurvatureBundle::compute(&g, &CurvatureOptions::default());
        let n = 4;
        let sup_rm = b.rm.max_abs();
        assert!(b.rm.symmetry_defect() <= 1e-14 * sup_rm);
        for p in 0..g.grid().npoints() {
            let r = b.rm.at(p);
            let ginv = g.inv_at(p);
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        for l in 0..n {
                            let bi = r[idx4(n, i, j, k, l)] + r[idx4(n, j, k, i, l)] + r[idx4(n, k, i, j, l)];
                            assert!(bi.abs() < 1e-11 * sup_rm);
                        }
                    }
                }
            }
            let tr_a: f64 = (0..n * n).map(|c| ginv[c] * b.a.at(p)[c]).sum();
            let s = b.s.data()[p];
            assert!((tr_a - s / 6.0).abs() <= 1e-12 * s.abs().max(1.0));
            let tr_b: f64 = (0..n * n).map(|c| ginv[c] * b.b.at(p)[c]).sum();
            assert!(tr_b.abs() < 1e-12 * b.b.max_abs());
            // Cotton: antisymmetric in the last pair and trace-free.
            let c = b.c.at(p);
            for i in 0..n {
                let mut t1 = 0.0;
                let mut t2 = 0.0;
                for j in 0..n {
                    for k in 0..n {
                        assert_eq!(c[(i * n + j) * n + k], -c[(i * n + k) * n + j]);
                        t1 += ginv[j * n + k] * c[(j * n + k) * n + i];
                        t2 += ginv[j * n + k] * c[(i * n + j) * n + k];
                    }
                }
                assert!(t2.abs() < 1e-12 * b.c.max_abs());
                // g^{ij} C_ijk is a derivative identity, exact only up to discretization.
                assert!(t1.abs() < 1e-2 * b.c.max_abs(), "{t1} {}", b.c.max_abs());
            }
        }
        assert!(b.bach_trace_residual() < 1e-14);
        // The trace removed from Bach is a discretization residual.
        assert!(b.bach_raw_trace_residual() < 1e-2, "{}", b.bach_raw_trace_residual());
    }

    #[test]
    fn metric_is_parallel() {
        let g = warped_metric(vec![16, 16, 1, 1]);
        let st = Stencil::default();
        let gamma = christoffel(&g, &st);
        let ng = covariant_derivative(g.tensor(), &gamma, &st);
        let dg = crate::mesh::gradient(g.tensor(), &st);
        assert!(ng.max_abs() < 1e-11 * dg.max_abs(), "{} vs {}", ng.max_abs(), dg.max_abs());
    }

    #[test]
    fn flat_covariant_derivative_is_partial() {
        let grid = Grid::unit(vec![8, 6, 1, 1]).unwrap();
        let g = MetricField::flat(&grid);
        let st = Stencil::default();
        let gamma = christoffel(&g, &st);
        let t = TensorField::from_fn(&grid, 2, Symmetry::None, |x, out| {
            for (c, o) in out.iter_mut().enumerate() {
                *o = (x[0] * 6.0 + c as f64).sin() * (x[1] * 6.0).cos();
            }
        });
        assert_eq!(covariant_derivative(&t, &gamma, &st).data(), crate::mesh::gradient(&t, &st).data());
    }

    #[test]
    fn hessian_symmetric_before_symmetrization() {
        let g = warped_metric(vec![16, 16, 1, 1]);
        let st = Stencil::default();
        let gamma = christoffel(&g, &st);
        let f = TensorField::scalar_from_fn(g.grid(), |x| (6.283 * x[0]).sin() * (6.283 * x[1]).cos());
        let df = covariant_derivative(&f, &gamma, &st);
        let ddf = covariant_derivative(&df, &gamma, &st);
        let mut defect: f64 = 0.0;
        for p in 0..g.grid().npoints() {
            let h = ddf.at(p);
            for i in 0..4 {
                for j in 0..4 {
                    defect = defect.max((h[i * 4 + j] - h[j * 4 + i]).abs());
                }
            }
        }
        assert!(defect < 1e-3 * ddf.max_abs(), "defect {defect}");
    }

    #[test]
    fn t_tensor_properties() {
        let grid = Grid::unit(vec![8, 8, 1, 1]).unwrap();
        let g = MetricField::flat(&grid);
        let st = Stencil::default();
        let gamma = christoffel(&g, &st);
        let c = TensorField::constant_scalar(&grid, 3.0);
        assert_eq!(t_tensor(&g, &gamma, &c, &st).max_abs(), 0.0);
        let bump = TensorField::scalar_from_fn(&grid, |x| (std::f64::consts::TAU * x[0]).sin().powi(2));
        let t = t_tensor(&g, &gamma, &bump, &st);
        let h = hessian(&bump, &gamma, &st);
        let n = 4;
        for p in 0..grid.npoints() {
            let (tp, hp) = (t.at(p), h.at(p));
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        for l in 0..n {
                            let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
                            let want = d(j, l) * hp[i * n + k] - d(j, k) * hp[i * n + l] - d(i, l) * hp[j * n + k]
                                + d(i, k) * hp[j * n + l];
                            let v = tp[idx4(n, i, j, k, l)];
                            assert!((v - want).abs() < 1e-12);
                            assert_eq!(v, -tp[idx4(n, j, i, k, l)]);
                            assert_eq!(v, -tp[idx4(n, i, j, l, k)]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn variation_vanishes_for_trivial_directions() {
        let grid = Grid::unit(vec![6, 6, 1, 1]).unwrap();
        let g = MetricField::flat(&grid);
        let b = CurvatureBundle::compute(&g, &CurvatureOptions::default());
        let zero = TensorField::zeros(&grid, 2, Symmetry::Symmetric);
        assert_eq!(curvature_variation(&b, &zero).max_abs(), 0.0);
        assert_eq!(curvature_variation(&b, &g.tensor().scaled(0.7)).max_abs(), 0.0);
    }

    #[test]
    fn second_order_stencil_pipeline_runs() {
        let g = warped_metric(vec![16, 16, 1, 1]);
        let b = CurvatureBundle::compute(&g, &CurvatureOptions { stencil: Stencil::central(StencilOrder::Second), weyl_form: false });
        assert!(b.b.max_abs() > 0.0);
        let _ = FourierMode { wave: vec![0; 4], amplitude: 0.0, phase: 0.0 };
    }
}
