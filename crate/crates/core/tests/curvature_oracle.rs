use cbf_core::checks::{conformal_invariance_defect, observed_order, refinement_study};
use cbf_core::mesh::{Grid, Stencil};
use cbf_core::oracle::{AnalyticMetric, FourierMode, FourierSeries, MetricFamily};

fn thin_warped(dim: usize) -> AnalyticMetric {
    let wave = |a: usize, b: usize| {
        let mut w = vec![0; dim];
        w[0] = a as i32;
        w[1] = b as i32;
        w
    };
    AnalyticMetric::unit(
        MetricFamily::DoublyWarped {
            split: 2,
            alpha: FourierSeries {
                modes: vec![
                    FourierMode { wave: wave(0, 1), amplitude: 0.1, phase: 0.3 },
                    FourierMode { wave: wave(1, 1), amplitude: 0.04, phase: 1.0 },
                ],
            },
            beta: FourierSeries::single(wave(1, 0), 0.08, -0.4),
        },
        dim,
    )
    .unwrap()
}

fn thin(dim: usize, n: usize) -> Vec<usize> {
    let mut s = vec![1; dim];
    s[0] = n;
    s[1] = n;
    s
}

#[test]
fn thin_grid_oracle_convergence_dim4() {
    let study = refinement_study(&thin_warped(4), thin(4, 32), thin(4, 64), &Stencil::default()).unwrap();
    for name in study.names() {
        if name == "bach_divergence_without_cotton" {
            continue;
        }
        let order = study.order(name);
        assert!(order >= 3.5, "{name}: order {order:.2} ({:?} -> {:?})", study.coarse[name], study.fine[name]);
        assert!(study.fine[name].relative() < 1e-3, "{name}: {:?}", study.fine[name]);
    }
    // In dimension 4 the Cotton term carries a zero coefficient.
    assert_eq!(study.fine["bach_divergence"], study.fine["bach_divergence_without_cotton"]);
}

#[test]
fn thin_grid_bach_divergence_dim5() {
    let study = refinement_study(&thin_warped(5), thin(5, 32), thin(5, 64), &Stencil::default()).unwrap();
    let order = study.order("bach_divergence");
    assert!(order >= 3.5, "order {order}");
    let without = study.fine["bach_divergence_without_cotton"].relative();
    assert!(without > 1e-2, "Cotton term is not visible: {without}");
    assert!(study.fine["bach_divergence"].relative() < 1e-2 * without);
    for name in ["b", "dual_bach", "cotton_weyl", "w", "c"] {
        assert!(study.order(name) >= 3.5, "{name}: {}", study.order(name));
    }
}

#[test]
fn thin_grid_conformal_invariance() {
    let u = FourierSeries::single(vec![1, 1, 0, 0], 0.05, 0.2);
    let base = thin_warped(4);
    let e32 = conformal_invariance_defect(&base, &u, &Grid::unit(thin(4, 32)).unwrap(), &Stencil::default()).unwrap();
    let e64 = conformal_invariance_defect(&base, &u, &Grid::unit(thin(4, 64)).unwrap(), &Stencil::default()).unwrap();
    let order = observed_order(e32.error, e64.error, 1.0 / 32.0, 1.0 / 64.0);
    assert!(order >= 3.5, "order {order}");
    assert!(e64.relative() < 1e-3);
}

#[test]
fn conformally_flat_grid_bach_is_small() {
    let u = FourierSeries::single(vec![1, 0, 0, 0], 0.05, 0.0);
    let m = AnalyticMetric::unit(MetricFamily::ConformallyFlat { u }, 4).unwrap();
    let mut prev = f64::INFINITY;
    for n in [32, 64] {
        let grid = Grid::unit(vec![n, 1, 1, 1]).unwrap();
        let g = m.sample_to_grid(&grid).unwrap();
        let b = cbf_core::curvature::CurvatureBundle::compute(&g, &Default::default());
        let sup = b.b.max_abs().max(b.w.max_abs()).max(b.c.max_abs());
        assert!(sup < prev / 12.0, "n={n}: {sup}");
        prev = sup;
    }
    assert!(prev < 1e-3);
}
