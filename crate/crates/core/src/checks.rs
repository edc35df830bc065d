//! Grid-versus-oracle comparisons and refinement-order measurements shared by the
//! test suites and the `verify` command.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::curvature::{CurvatureBundle, CurvatureOptions};
use crate::mesh::{Grid, MeshError, MetricField, Stencil, TensorField};
use crate::oracle::{AnalyticMetric, OracleOptions, OraclePoint};

/// Largest error and the reference scale it should be compared against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorMeasure {
    pub error: f64,
    pub scale: f64,
}

impl ErrorMeasure {
    pub fn relative(&self) -> f64 {
        if self.scale == 0.0 {
            self.error
        } else {
            self.error / self.scale
        }
    }
}

/// Observed order `log(e_coarse / e_fine) / log(h_coarse / h_fine)`.
pub fn observed_order(e_coarse: f64, e_fine: f64, h_coarse: f64, h_fine: f64) -> f64 {
    (e_coarse / e_fine).ln() / (h_coarse / h_fine).ln()
}

/// Node indices shared by two grids with the same periods: `(coarse, fine)` pairs.
pub fn common_nodes(a: &Grid, b: &Grid) -> Vec<(usize, usize)> {
    assert_eq!(a.periods(), b.periods());
    let n = a.dim();
    let shared: Vec<usize> = (0..n).map(|ax| gcd(a.sizes()[ax], b.sizes()[ax])).collect();
    let total: usize = shared.iter().product();
    (0..total)
        .map(|mut flat| {
            let mut ia = vec![0; n];
            let mut ib = vec![0; n];
            for ax in (0..n).rev() {
                let m = flat % shared[ax];
                flat /= shared[ax];
                ia[ax] = m * a.sizes()[ax] / shared[ax];
                ib[ax] = m * b.sizes()[ax] / shared[ax];
            }
            (a.index_of(&ia), b.index_of(&ib))
        })
        .collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sup_diff(field: &TensorField, nodes: &[usize], oracle: &[&[f64]]) -> ErrorMeasure {
    let mut error: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (&p, o) in nodes.iter().zip(oracle) {
        for (a, b) in field.at(p).iter().zip(o.iter()) {
            error = error.max((a - b).abs());
            scale = scale.max(b.abs());
        }
    }
    ErrorMeasure { error, scale }
}

fn sup_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Names of the quantities reported by [`compare_with_oracle`].
pub const COMPARED_QUANTITIES: [&str; 12] = [
    "gamma",
    "rm",
    "rc",
    "s",
    "a",
    "w",
    "c",
    "b",
    "dual_bach",
    "cotton_weyl",
    "bach_divergence",
    "bach_divergence_without_cotton",
];

/// Evaluates the oracle at the given grid nodes.
pub fn oracle_at_nodes(metric: &AnalyticMetric, grid: &Grid, nodes: &[usize]) -> Vec<OraclePoint> {
    let points: Vec<Vec<f64>> = nodes.iter().map(|&p| grid.coords(p)).collect();
    metric.bundle_at_points(&points, &OracleOptions { rm_derivatives: 0, weyl_form: false, bach_derivatives: false })
}

/// Compares a grid bundle (computed with the Weyl form) against oracle values at `nodes`.
///
/// Tensor quantities report the sup component error against the oracle value scale.
/// Identity residuals (`dual_bach`, `cotton_weyl`, `bach_divergence*`) are sup residuals
/// over the same nodes, scaled by the oracle's sup of `B`, `C`, and `B` respectively.
pub fn compare_with_oracle(
    bundle: &CurvatureBundle,
    nodes: &[usize],
    oracle: &[OraclePoint],
) -> BTreeMap<&'static str, ErrorMeasure> {
    let mut out = BTreeMap::new();
    let pick = |f: fn(&OraclePoint) -> &[f64]| oracle.iter().map(f).collect::<Vec<_>>();
    out.insert("gamma", sup_diff(&bundle.gamma, nodes, &pick(|o| &o.gamma)));
    out.insert("rm", sup_diff(&bundle.rm, nodes, &pick(|o| &o.rm)));
    out.insert("rc", sup_diff(&bundle.rc, nodes, &pick(|o| &o.rc)));
    out.insert("s", sup_diff(&bundle.s, nodes, &pick(|o| std::slice::from_ref(&o.s))));
    out.insert("a", sup_diff(&bundle.a, nodes, &pick(|o| &o.a)));
    out.insert("w", sup_diff(&bundle.w, nodes, &pick(|o| &o.w)));
    out.insert("c", sup_diff(&bundle.c, nodes, &pick(|o| &o.c)));
    out.insert("b", sup_diff(&bundle.b, nodes, &pick(|o| &o.b_primary)));
    let b_scale = oracle.iter().map(|o| sup_abs(&o.b_primary)).fold(0.0, f64::max);
    let c_scale = oracle.iter().map(|o| sup_abs(&o.c)).fold(0.0, f64::max);
    if let Some(balt) = &bundle.b_alt {
        let e = nodes
            .iter()
            .map(|&p| sup_abs(&bundle.b.at(p).iter().zip(balt.at(p)).map(|(x, y)| x - y).collect::<Vec<_>>()))
            .fold(0.0, f64::max);
        out.insert("dual_bach", ErrorMeasure { error: e, scale: b_scale });
    }
    if let Some(cw) = bundle.cotton_weyl_residual() {
        let e = nodes.iter().map(|&p| cw.data()[p]).fold(0.0, f64::max);
        out.insert("cotton_weyl", ErrorMeasure { error: e, scale: c_scale });
    }
    for (name, with_c) in [("bach_divergence", true), ("bach_divergence_without_cotton", false)] {
        let r = bundle.bach_divergence_residual(with_c);
        let e = nodes.iter().map(|&p| r.data()[p]).fold(0.0, f64::max);
        out.insert(name, ErrorMeasure { error: e, scale: b_scale });
    }
    out
}

/// Per-quantity errors on a coarse and a fine grid at their common nodes, and the observed order.
#[derive(Debug, Clone)]
pub struct RefinementStudy {
    pub h_coarse: f64,
    pub h_fine: f64,
    pub coarse: BTreeMap<&'static str, ErrorMeasure>,
    pub fine: BTreeMap<&'static str, ErrorMeasure>,
}

impl RefinementStudy {
    pub fn order(&self, name: &str) -> f64 {
        observed_order(self.coarse[name].error, self.fine[name].error, self.h_coarse, self.h_fine)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.coarse.keys().copied().filter(|k| self.fine.contains_key(k)).collect()
    }
}

/// Runs the full oracle comparison on two grids.
pub fn refinement_study(
    metric: &AnalyticMetric,
    coarse_sizes: Vec<usize>,
    fine_sizes: Vec<usize>,
    stencil: &Stencil,
) -> Result<RefinementStudy, MeshError> {
    let periods = metric.periods().to_vec();
    let gc = Grid::new(coarse_sizes, periods.clone())?;
    let gf = Grid::new(fine_sizes, periods)?;
    let pairs = common_nodes(&gc, &gf);
    let nodes_c: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let nodes_f: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let oracle = oracle_at_nodes(metric, &gc, &nodes_c);
    let opts = CurvatureOptions::with_weyl_form(stencil.clone());
    let run = |grid: &Arc<Grid>, nodes: &[usize]| -> Result<_, MeshError> {
        let g = sample(metric, grid)?;
        let bundle = CurvatureBundle::compute(&g, &opts);
        Ok(compare_with_oracle(&bundle, nodes, &oracle))
    };
    let coarse = run(&gc, &nodes_c)?;
    let fine = run(&gf, &nodes_f)?;
    Ok(RefinementStudy { h_coarse: gc.h_min(), h_fine: gf.h_min(), coarse, fine })
}

fn sample(metric: &AnalyticMetric, grid: &Arc<Grid>) -> Result<MetricField, MeshError> {
    metric
        .sample_to_grid(grid)
        .map_err(|_| MeshError::NotPositiveDefinite { point: 0, min_eigenvalue: f64::NAN })
}

/// `sup |B(exp(2u) g) - exp(-2u) B(g)|` and `sup |B(g)|` on one grid (dimension 4).
pub fn conformal_invariance_defect(
    base: &AnalyticMetric,
    u: &crate::oracle::FourierSeries,
    grid: &Arc<Grid>,
    stencil: &Stencil,
) -> Result<ErrorMeasure, MeshError> {
    let g = sample(base, grid)?;
    let uf = u.sample(grid);
    let gu = g.conformal(&uf)?;
    let opts = CurvatureOptions { stencil: stencil.clone(), weyl_form: false };
    let b = CurvatureBundle::compute(&g, &opts).b;
    let bu = CurvatureBundle::compute(&gu, &opts).b;
    let nc = b.ncomp();
    let mut error: f64 = 0.0;
    for p in 0..grid.npoints() {
        let f = (-2.0 * uf.data()[p]).exp();
        for c in 0..nc {
            error = error.max((bu.at(p)[c] - f * b.at(p)[c]).abs());
        }
    }
    Ok(ErrorMeasure { error, scale: b.max_abs() })
}
