use std::sync::Arc;

use cbf_core::checks::{common_nodes, observed_order};
use cbf_core::curvature::{CurvatureBundle, CurvatureOptions};
use cbf_core::diagnostics::*;
use cbf_core::flow::{evaluate, FlowOptions, FlowState, Variant};
use cbf_core::mesh::{norm_sq_at, Grid, MetricField};
use cbf_core::oracle::{AnalyticMetric, FourierSeries, MetricFamily, OracleOptions};

fn warped() -> AnalyticMetric {
    AnalyticMetric::unit(
        MetricFamily::DoublyWarped {
            split: 2,
            alpha: FourierSeries::single(vec![0, 1, 0, 0], 0.08, 0.3),
            beta: FourierSeries::single(vec![1, 0, 0, 0], 0.06, -0.4),
        },
        4,
    )
    .unwrap()
}

fn thin(n: usize) -> Arc<Grid> {
    Grid::unit(vec![n, n, 1, 1]).unwrap()
}

fn bundle(g: &MetricField) -> CurvatureBundle {
    CurvatureBundle::compute(g, &CurvatureOptions::default())
}

#[test]
fn flat_metric_monitors_vanish() {
    let g = MetricField::flat(&Grid::unit(vec![6, 6, 6, 1]).unwrap());
    let b = bundle(&g);
    assert_eq!(weyl_energy(&b), 0.0);
    for m in 1..=2 {
        assert_eq!(shi_l2_monitor(&b, m, 0.5), 0.0);
        assert_eq!(shi_pointwise_monitor(&b, m, 0.5, 1.0), 0.0);
        assert_eq!(f_m_field(&b, m).max_abs(), 0.0);
    }
}

#[test]
fn shi_ratios_are_invariant_under_parabolic_scaling() {
    let g = warped().sample_to_grid(&thin(24)).unwrap();
    let b = bundle(&g);
    let (t, k) = (0.3, 2.5);
    for lambda in [0.25, 3.0] {
        let bs = bundle(&g.scaled(lambda).unwrap());
        let rm0 = integrate_rm(&b);
        let rm0s = integrate_rm(&bs);
        for m in 1..=2 {
            let a = shi_pointwise_monitor(&b, m, t, k);
            let c = shi_pointwise_monitor(&bs, m, lambda * lambda * t, k / lambda);
            assert!(a > 0.0 && (a - c).abs() < 1e-10 * a, "ptwise m={m}: {a} vs {c}");
            let a = shi_l2_monitor(&b, m, t) / rm0;
            let c = shi_l2_monitor(&bs, m, lambda * lambda * t) / rm0s;
            assert!(a > 0.0 && (a - c).abs() < 1e-10 * a, "l2 m={m}: {a} vs {c}");
        }
    }
}

fn integrate_rm(b: &CurvatureBundle) -> f64 {
    let n = cbf_core::mesh::norms(&b.rm, &b.metric);
    n.l2 * n.l2
}

#[test]
fn shi_l2_grows_like_sqrt_t_on_a_fixed_metric() {
    let b = bundle(&warped().sample_to_grid(&thin(16)).unwrap());
    let r = shi_l2_monitor(&b, 1, 0.4) / shi_l2_monitor(&b, 1, 0.1);
    assert!((r - 2.0).abs() < 1e-12);
}

#[test]
fn single_term_f_m_is_two_thirds_power() {
    let b = bundle(&warped().sample_to_grid(&thin(16)).unwrap());
    let d = b.rm_derivative_norms(1).remove(0);
    let f = f_m_field(&b, 1);
    for (x, y) in f.data().iter().zip(d.data()) {
        assert!((x - y.sqrt().powf(2.0 / 3.0)).abs() <= 1e-14 * x.abs().max(1.0));
    }
}

#[test]
fn f_m_matches_oracle_derivatives() {
    let metric = warped();
    let (gc, gf) = (thin(32), thin(64));
    let pairs: Vec<_> = common_nodes(&gc, &gf).into_iter().step_by(29).collect();
    let points: Vec<Vec<f64>> = pairs.iter().map(|&(p, _)| gc.coords(p)).collect();
    let opts = OracleOptions { rm_derivatives: 2, weyl_form: false, bach_derivatives: false };
    let mut scratch = Vec::new();
    let reference: Vec<f64> = metric
        .bundle_at_points(&points, &opts)
        .iter()
        .map(|o| {
            let d1 = norm_sq_at(4, 5, &o.ginv, &o.grad_rm, &mut scratch);
            let d2 = norm_sq_at(4, 6, &o.ginv, &o.hess_rm, &mut scratch);
            d1.sqrt().powf(2.0 / 3.0) + d2.sqrt().powf(2.0 / 4.0)
        })
        .collect();
    let mut errs = Vec::new();
    for (grid, fine) in [(&gc, false), (&gf, true)] {
        let f = f_m_field(&bundle(&metric.sample_to_grid(grid).unwrap()), 2);
        let e = pairs
            .iter()
            .zip(&reference)
            .map(|(&(pc, pf), r)| (f.data()[if fine { pf } else { pc }] - r).abs())
            .fold(0.0, f64::max);
        errs.push(e);
    }
    let order = observed_order(errs[0], errs[1], 1.0 / 32.0, 1.0 / 64.0);
    assert!(order >= 3.5, "{errs:?} order {order}");
}

#[test]
fn weyl_energy_converges_to_oracle_quadrature() {
    let metric = warped();
    let fine = thin(96);
    let g = metric.sample_to_grid(&fine).unwrap();
    let points: Vec<Vec<f64>> = (0..fine.npoints()).map(|p| fine.coords(p)).collect();
    let opts = OracleOptions::basic();
    let mut scratch = Vec::new();
    let cell: f64 = fine.spacing().iter().product();
    let reference: f64 = metric
        .bundle_at_points(&points, &opts)
        .iter()
        .zip(g.sqrt_det())
        .map(|(o, w)| norm_sq_at(4, 4, &o.ginv, &o.w, &mut scratch) * w * cell)
        .sum();
    assert!(reference > 1e-3);
    let errs: Vec<f64> = [16, 32]
        .iter()
        .map(|&n| (weyl_energy(&bundle(&metric.sample_to_grid(&thin(n)).unwrap())) - reference).abs())
        .collect();
    let order = observed_order(errs[0], errs[1], 1.0 / 16.0, 1.0 / 32.0);
    assert!(order >= 3.5, "{errs:?} order {order}");
}

#[test]
fn weyl_energy_is_tiny_for_conformally_flat_data() {
    let grid = thin(32);
    let u = FourierSeries::single(vec![1, 1, 0, 0], 0.05, 0.2).sample(&grid);
    let g = MetricField::flat(&grid).conformal(&u).unwrap();
    let rm = cbf_core::mesh::norms(&bundle(&g).rm, &g).l2;
    assert!(weyl_energy(&bundle(&g)) < 1e-8 * rm * rm);
}

#[test]
fn monitor_rows_follow_the_header() {
    let grid = thin(12);
    let state = FlowState::new(warped().sample_to_grid(&grid).unwrap(), -0.1, Variant::Cbf, None).unwrap();
    let e = evaluate(&state, &FlowOptions::default()).unwrap();
    let mut mon = Monitor::new(DiagnosticsConfig::default());
    let r = mon.record(&state, &e, None);
    let cols = csv_header(2).split(',').count();
    assert_eq!(r.csv_row().split(',').count(), cols);
    assert_eq!(r.shi_l2, vec![0.0, 0.0]);
    assert!(r.extension.within_bounds);
    let k0 = mon.k_observed;
    let failed = mon.record(&state, &e, Some("SingularMetric"));
    assert!(!failed.extension.within_bounds);
    assert_eq!(failed.extension.label(), "violated:SingularMetric");
    assert!(mon.k_observed >= k0);
}
