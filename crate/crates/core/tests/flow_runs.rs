use std::f64::consts::PI;
use std::sync::Arc;

use cbf_core::checks::{common_nodes, observed_order};
use cbf_core::curvature::{christoffel, CurvatureBundle, CurvatureOptions};
use cbf_core::diagnostics::{DiagnosticsConfig, Monitor};
use cbf_core::flow::*;
use cbf_core::mesh::{Grid, MetricField, Stencil, TensorField};
use cbf_core::oracle::jet::JetSpace;
use cbf_core::oracle::{AnalyticMetric, FourierSeries, JetGeometry, MetricFamily};
use cbf_core::pressure::laplace_beltrami;

fn wave(a: i32, b: i32) -> Vec<i32> {
    vec![a, b, 0, 0]
}

fn warped() -> AnalyticMetric {
    AnalyticMetric::unit(
        MetricFamily::DoublyWarped {
            split: 2,
            alpha: FourierSeries::single(wave(0, 1), 0.05, 0.3),
            beta: FourierSeries::single(wave(1, 0), 0.05, -0.4),
        },
        4,
    )
    .unwrap()
}

fn thin(n: usize) -> Arc<Grid> {
    Grid::unit(vec![n, n, 1, 1]).unwrap()
}

fn projected(n: usize) -> (MetricField, f64) {
    let g = warped().sample_to_grid(&thin(n)).unwrap();
    let p = project_constant_scalar(&g, ScalarLevel::Auto, &Stencil::default(), &Default::default()).unwrap();
    assert!(p.residual <= 1e-10, "{}", p.residual);
    (p.metric, p.s0)
}

fn sup_diff(a: &TensorField, b: &TensorField) -> f64 {
    a.sub(b).max_abs()
}

#[test]
fn flat_run_keeps_every_drift_column_at_zero() {
    let grid = Grid::unit(vec![6, 6, 1, 1]).unwrap();
    let state = FlowState::new(MetricField::flat(&grid), 0.0, Variant::Cbf, None).unwrap();
    let mut mon = Monitor::new(DiagnosticsConfig::default());
    let mut rows = Vec::new();
    let out = run(state, None, &StepPolicy { max_steps: 100, ..Default::default() }, &FlowOptions::default(), 10, true, |s, e| {
        rows.push(mon.record(s, e, None));
        Control::Continue
    });
    assert_eq!(out.termination, Termination::MaxSteps);
    assert_eq!(rows.len(), 11);
    for r in rows {
        for v in [r.scalar_drift, r.bach_trace_residual, r.bach_divergence_residual, r.weyl_energy, r.p_sup] {
            assert!(v < 1e-12);
        }
        assert!(r.extension.within_bounds);
    }
}

#[test]
fn zero_end_time_gives_only_the_initial_record() {
    let grid = Grid::unit(vec![6, 6, 1, 1]).unwrap();
    let state = FlowState::new(MetricField::flat(&grid), 0.0, Variant::Cbf, None).unwrap();
    let mut count = 0;
    let out = run(state, None, &StepPolicy { t_end: 0.0, ..Default::default() }, &FlowOptions::default(), 1, true, |_, _| {
        count += 1;
        Control::Continue
    });
    assert_eq!(out.termination, Termination::EndTime);
    assert_eq!(count, 1);
}

#[test]
fn velocity_trace_is_pressure() {
    let (g, s0) = projected(24);
    let state = FlowState::new(g, s0, Variant::Cbf, None).unwrap();
    let e = evaluate(&state, &FlowOptions::default()).unwrap();
    let p = &e.pressure.as_ref().unwrap().p;
    let n = 4;
    let scale = e.velocity.max_abs();
    for pt in 0..p.data().len() {
        let tr: f64 = (0..n * n).map(|c| state.metric.inv_at(pt)[c] * e.velocity.at(pt)[c]).sum();
        assert!((tr - 2.0 * 2.0 * 4.0 * p.data()[pt]).abs() < 1e-12 * scale);
    }
}

#[test]
fn modified_velocity_adds_the_scalar_laplacian_term() {
    let g = warped().sample_to_grid(&thin(24)).unwrap();
    let b = CurvatureBundle::compute(&g, &CurvatureOptions::default());
    let p = TensorField::scalar_from_fn(g.grid(), |x| 0.3 * (2.0 * PI * x[1]).cos());
    let diff = velocity_modified_cbf(&b, &p).sub(&velocity_cbf(&b, &p));
    let lap_s = laplace_beltrami(&g, &b.s, &Stencil::default());
    assert!(lap_s.max_abs() > 1.0);
    for pt in 0..g.grid().npoints() {
        for c in 0..16 {
            let expect = lap_s.data()[pt] * g.g_at(pt)[c] / 3.0;
            assert!((diff.at(pt)[c] - expect).abs() <= 1e-12 * lap_s.max_abs());
        }
    }
    let bh = velocity_bh_bach(&b).sub(&b.b);
    for pt in 0..g.grid().npoints() {
        for c in 0..16 {
            let expect = lap_s.data()[pt] * g.g_at(pt)[c] / 12.0;
            assert!((bh.at(pt)[c] - expect).abs() <= 1e-12 * lap_s.max_abs());
        }
    }
}

#[test]
fn constant_scalar_metric_makes_variants_agree() {
    let (g, s0) = projected(24);
    let b = CurvatureBundle::compute(&g, &CurvatureOptions::default());
    let p = TensorField::constant_scalar(g.grid(), 0.0);
    let d = sup_diff(&velocity_modified_cbf(&b, &p), &velocity_cbf(&b, &p));
    assert!(d < 1e-6 * velocity_cbf(&b, &p).max_abs(), "{d}");
    let dbh = sup_diff(&velocity_bh_bach(&b), &b.b);
    assert!(dbh < 1e-6 * b.b.max_abs(), "{dbh}");
    let _ = s0;
}

#[test]
fn projection_undoes_a_conformal_factor() {
    let grid = thin(32);
    let u0 = FourierSeries::single(wave(1, 1), 0.08, 0.2).sample(&grid);
    let g = MetricField::flat(&grid).conformal(&u0).unwrap();
    let pr = project_constant_scalar(&g, ScalarLevel::Fixed(0.0), &Stencil::default(), &Default::default()).unwrap();
    assert!(pr.residual <= 1e-10);
    let shift = pr.u.data()[0] + u0.data()[0];
    let dev = pr.u.data().iter().zip(u0.data()).map(|(a, b)| (a + b - shift).abs()).fold(0.0, f64::max);
    assert!(dev < 1e-6, "{dev}");
}

#[test]
fn auto_level_is_negative_and_converges() {
    let (g32, s32) = projected(32);
    let (_, s64) = projected(64);
    assert!(s32 < 0.0);
    assert!((s32 - s64).abs() < 1e-4 * s32.abs());
    let vol_in = warped().sample_to_grid(&thin(32)).unwrap().volume();
    assert!((g32.volume() - vol_in).abs() < 1e-12);
}

#[test]
fn step_halving_is_third_order_for_rk2() {
    let (g, s0) = projected(16);
    let state = FlowState::new(g, s0, Variant::Cbf, None).unwrap();
    let opts = FlowOptions::default();
    let e0 = evaluate(&state, &opts).unwrap();
    let base = StepPolicy::default().dt_for(state.metric.grid().h_min(), e0.rm_sup) * 4.0;
    let mut errs = Vec::new();
    for dt in [base, base / 2.0] {
        let full = step(&state, &StepPolicy { scheme: Scheme::Rk2, dt: Some(dt), ..Default::default() }, &opts).unwrap();
        let half = StepPolicy { scheme: Scheme::Rk2, dt: Some(dt / 2.0), ..Default::default() };
        let two = step(&step(&state, &half, &opts).unwrap(), &half, &opts).unwrap();
        errs.push(sup_diff(full.metric.tensor(), two.metric.tensor()));
    }
    let order = (errs[0] / errs[1]).log2();
    assert!(order > 2.5, "{errs:?} order {order}");
}

#[test]
fn log_det_follows_the_pressure() {
    let (g, s0) = projected(24);
    let state = FlowState::new(g, s0, Variant::Cbf, None).unwrap();
    let opts = FlowOptions::default();
    let e = evaluate(&state, &opts).unwrap();
    let p = e.pressure.as_ref().unwrap().p.clone();
    let mut errs = Vec::new();
    let dt0 = StepPolicy::default().dt_for(state.metric.grid().h_min(), e.rm_sup);
    for dt in [dt0, dt0 / 4.0] {
        let next = step_from(&state, &e, &StepPolicy { dt: Some(dt), ..Default::default() }, &opts).unwrap();
        let err = (0..p.data().len())
            .map(|pt| {
                let rate = 2.0 * (next.metric.sqrt_det()[pt] / state.metric.sqrt_det()[pt]).ln() / dt;
                (rate - 16.0 * p.data()[pt]).abs()
            })
            .fold(0.0, f64::max);
        errs.push(err);
    }
    assert!(errs[0] < 1e-2 * 16.0 * p.max_abs(), "{errs:?}");
    assert!(errs[1] < errs[0] / 3.0, "{errs:?}");
}

#[test]
fn conformally_flat_data_is_a_fixed_point_at_level_zero() {
    let mut rates = Vec::new();
    for n in [32, 64] {
        let grid = thin(n);
        let u = FourierSeries::single(wave(1, 0), 0.05, 0.0).sample(&grid);
        let g = MetricField::flat(&grid).conformal(&u).unwrap();
        let state = FlowState::new(g.clone(), 0.0, Variant::Cbf, None).unwrap();
        let mut opts = FlowOptions::default();
        opts.pressure.compat_tol = 1e-3;
        let out = run(state, None, &StepPolicy { max_steps: 10, ..Default::default() }, &opts, 10, false, |_, _| {
            Control::Continue
        });
        assert_eq!(out.termination, Termination::MaxSteps, "{:?}", out.error);
        rates.push(sup_diff(out.state.metric.tensor(), g.tensor()) / out.state.t);
    }
    assert!(rates[1] < rates[0] / 8.0, "{rates:?}");
    assert!(rates[1] < 1e-2, "{rates:?}");
}

#[test]
fn deturck_field_vanishes_for_identical_metrics() {
    let grid = Grid::unit(vec![8, 8, 1, 1]).unwrap();
    let g = MetricField::flat(&grid);
    let b = CurvatureBundle::compute(&g, &CurvatureOptions::default());
    assert_eq!(deturck_vector_field(&b, &b.gamma).max_abs(), 0.0);
    let state = FlowState::new(g.clone(), 0.0, Variant::DeturckCbf, Some(g)).unwrap();
    let e = evaluate(&state, &FlowOptions::default()).unwrap();
    assert_eq!(e.velocity.max_abs(), 0.0);
}

/// Independent jet assembly of the DeTurck covector and `L_W g` at one point.
fn deturck_oracle(g: &AnalyticMetric, bg: &AnalyticMetric, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = 4;
    let space = JetSpace::new(n, 5);
    let s = &*space;
    let geo = JetGeometry::new(s, g.family().metric_jet(s, x, g.periods()));
    let bgeo = JetGeometry::new(s, bg.family().metric_jet(s, x, bg.periods()));
    let mut t = Vec::new();
    for l in 0..n {
        for ij in 0..n * n {
            let mut acc = s.zero();
            for k in 0..n {
                let d = s.sub(&geo.christoffel()[k * n * n + ij], &bgeo.christoffel()[k * n * n + ij]);
                s.fma(&mut acc, 1.0, &geo.metric()[l * n + k], &d);
            }
            t.push(acc);
        }
    }
    let nnt = geo.cov_deriv(4, &geo.cov_deriv(3, &t));
    let lap = geo.trace(5, &nnt, 0, 1);
    let contracted = geo.trace(3, &lap, 1, 2);
    let rc = geo.trace(4, &geo.riemann(), 1, 2);
    let scal = geo.trace(2, &rc, 0, 1).remove(0);
    let coef = 2.0 / 6.0;
    let w: Vec<_> = (0..n)
        .map(|l| {
            let mut v = contracted[l].scaled(-1.0);
            s.add_scaled(&mut v, coef, &s.deriv(&scal, l));
            v
        })
        .collect();
    let nw = geo.cov_deriv(1, &w);
    let lie = (0..n * n).map(|c| nw[c].value() + nw[(c % n) * n + c / n].value()).collect();
    (w.iter().map(|j| j.value()).collect(), lie)
}

#[test]
fn deturck_field_matches_jet_oracle() {
    let metric = warped();
    let bg = AnalyticMetric::unit(
        MetricFamily::ConformallyFlat { u: FourierSeries::single(wave(1, 1), 0.04, 0.5) },
        4,
    )
    .unwrap();
    let (gc, gf) = (thin(32), thin(64));
    let pairs = common_nodes(&gc, &gf);
    let picked: Vec<(usize, usize)> = pairs.iter().step_by(37).copied().collect();
    let oracle: Vec<_> = picked.iter().map(|&(p, _)| deturck_oracle(&metric, &bg, &gc.coords(p))).collect();
    let scale_w = oracle.iter().flat_map(|o| o.0.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    let scale_l = oracle.iter().flat_map(|o| o.1.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(scale_w > 1e-2 && scale_l > 1e-2);
    let mut ew = Vec::new();
    let mut el = Vec::new();
    for (grid, fine) in [(&gc, false), (&gf, true)] {
        let g = metric.sample_to_grid(grid).unwrap();
        let b = CurvatureBundle::compute(&g, &CurvatureOptions::default());
        let bgam = christoffel(&bg.sample_to_grid(grid).unwrap(), &Stencil::default());
        let w = deturck_vector_field(&b, &bgam);
        let lie = lie_derivative_of_metric(&w, &b.gamma, &Stencil::default());
        let (mut a, mut c) = (0.0f64, 0.0f64);
        for (&(pc, pf), o) in picked.iter().zip(&oracle) {
            let p = if fine { pf } else { pc };
            for (x, y) in w.at(p).iter().zip(&o.0) {
                a = a.max((x - y).abs());
            }
            for (x, y) in lie.at(p).iter().zip(&o.1) {
                c = c.max((x - y).abs());
            }
        }
        ew.push(a);
        el.push(c);
    }
    let h = (1.0 / 32.0, 1.0 / 64.0);
    assert!(observed_order(ew[0], ew[1], h.0, h.1) >= 3.5, "W {ew:?}");
    assert!(observed_order(el[0], el[1], h.0, h.1) >= 3.5, "L {el:?}");
    assert!(ew[1] < 1e-2 * scale_w && el[1] < 1e-2 * scale_l);
}

#[test]
fn singular_metric_is_reported() {
    let grid = Grid::unit(vec![8, 8, 1, 1]).unwrap();
    let g = warped().sample_to_grid(&grid).unwrap();
    let state = FlowState::new(g, 0.0, Variant::BhBach, None).unwrap();
    let policy = StepPolicy { scheme: Scheme::Rk2, dt: Some(1.0), max_steps: 5, ..Default::default() };
    let out = run(state, None, &policy, &FlowOptions::default(), 1, false, |_, _| Control::Continue);
    assert_eq!(out.termination, Termination::Error);
    assert!(matches!(out.error, Some(FlowError::SingularMetric { .. })), "{:?}", out.error);
    assert_eq!(out.state.step, 0);
}
