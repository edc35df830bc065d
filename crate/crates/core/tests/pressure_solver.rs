use std::f64::consts::PI;

use cbf_core::checks::common_nodes;
use cbf_core::curvature::{CurvatureBundle, CurvatureOptions};
use cbf_core::krylov::WeightedOperator;
use cbf_core::mesh::{inner_mu, Grid, MetricField, Stencil, TensorField};
use cbf_core::oracle::{AnalyticMetric, FourierMode, FourierSeries, MetricFamily, OracleOptions};
use cbf_core::pressure::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn warped(dim: usize) -> AnalyticMetric {
    let wave = |a: i32, b: i32| {
        let mut w = vec![0; dim];
        w[0] = a;
        w[1] = b;
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

fn random_field(grid: &std::sync::Arc<Grid>, rng: &mut ChaCha8Rng) -> TensorField {
    let data = (0..grid.npoints()).map(|_| rng.random_range(-1.0..1.0)).collect();
    TensorField::from_data(grid, 0, cbf_core::mesh::Symmetry::None, data)
}

fn l2(f: &TensorField, g: &MetricField) -> f64 {
    inner_mu(f, f, g).sqrt()
}

#[test]
fn laplacian_is_self_adjoint_on_oracle_metric() {
    let grid = Grid::unit(vec![12, 10, 6, 1]).unwrap();
    let g = warped(4).sample_to_grid(&grid).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..4 {
        let f = random_field(&grid, &mut rng);
        let h = random_field(&grid, &mut rng);
        let st = Stencil::default();
        let lhs = inner_mu(&laplace_beltrami(&g, &f, &st), &h, &g);
        let rhs = inner_mu(&f, &laplace_beltrami(&g, &h, &st), &g);
        assert!((lhs - rhs).abs() < 1e-11 * l2(&f, &g) * l2(&h, &g), "{lhs} vs {rhs}");
    }
}

#[test]
fn manufactured_solution_thin_grid() {
    let grid = Grid::unit(vec![48, 48, 1, 1]).unwrap();
    let g = warped(4).sample_to_grid(&grid).unwrap();
    let st = Stencil::default();
    let exact = TensorField::scalar_from_fn(&grid, |x| (2.0 * PI * x[0]).cos());
    let op = EllipticOperator::new(&g, -1.0, st.clone());
    let mut rhs = vec![0.0; grid.npoints()];
    op.apply(exact.data(), &mut rhs);
    for kind in [PreconditionerKind::None, PreconditionerKind::Jacobi, PreconditionerKind::Spectral] {
        let prob = EllipticProblem {
            metric: &g,
            s0: -1.0,
            rhs: TensorField::from_data(&grid, 0, cbf_core::mesh::Symmetry::None, rhs.clone()),
            initial_guess: None,
            stencil: st.clone(),
            options: PressureOptions { preconditioner: kind, ..Default::default() },
        };
        let sol = solve_pressure(&prob).unwrap();
        assert!(sol.residual <= 1e-10);
        let err = l2(&sol.p.sub(&exact), &g) / l2(&exact, &g);
        assert!(err < 1e-8, "{kind:?}: {err}");
        assert!(sol.margin > 1e-8);
    }
}

#[test]
fn warm_start_uses_fewer_iterations() {
    let grid = Grid::unit(vec![32, 32, 1, 1]).unwrap();
    let g = warped(4).sample_to_grid(&grid).unwrap();
    let rhs = TensorField::scalar_from_fn(&grid, |x| (2.0 * PI * x[1]).sin() + 0.3);
    let mut prob = EllipticProblem {
        metric: &g,
        s0: -2.0,
        rhs,
        initial_guess: None,
        stencil: Stencil::default(),
        options: PressureOptions::default(),
    };
    let cold = solve_pressure(&prob).unwrap();
    prob.initial_guess = Some(&cold.p);
    let warm = solve_pressure(&prob).unwrap();
    assert!(warm.iterations < cold.iterations, "{} vs {}", warm.iterations, cold.iterations);
}

#[test]
fn continuous_flat_eigenvalue_is_near_singular() {
    let grid = Grid::unit(vec![128, 1, 1, 1]).unwrap();
    let g = MetricField::flat(&grid);
    let prob = EllipticProblem {
        metric: &g,
        s0: 3.0 * (2.0 * PI).powi(2),
        rhs: TensorField::scalar_from_fn(&grid, |x| (2.0 * PI * x[0]).sin() + 1.0),
        initial_guess: None,
        stencil: Stencil::default(),
        options: PressureOptions::default(),
    };
    match solve_pressure(&prob) {
        Err(PressureError::NearSingularOperator { margin, .. }) => assert!(margin < 1e-8),
        other => panic!("expected NearSingularOperator, got {other:?}"),
    }
}

#[test]
fn rhs_matches_oracle() {
    let metric = warped(4);
    let oracle_opts = OracleOptions { rm_derivatives: 0, weyl_form: false, bach_derivatives: true };
    let mut errors = Vec::new();
    let mut hs = Vec::new();
    let coarse = Grid::unit(vec![32, 32, 1, 1]).unwrap();
    let fine = Grid::unit(vec![64, 64, 1, 1]).unwrap();
    let pairs = common_nodes(&coarse, &fine);
    let nodes: Vec<usize> = pairs.iter().step_by(17).map(|p| p.0).collect();
    let points: Vec<Vec<f64>> = nodes.iter().map(|&p| coarse.coords(p)).collect();
    let oracle = metric.bundle_at_points(&points, &oracle_opts);
    let scale = oracle.iter().fold(0.0f64, |m, o| m.max(o.pressure_rhs.abs()));
    assert!(scale > 1e-3);
    for grid in [&coarse, &fine] {
        let g = metric.sample_to_grid(grid).unwrap();
        let bundle = CurvatureBundle::compute(&g, &CurvatureOptions::default());
        let rhs = pressure_rhs(&bundle);
        let err = points
            .iter()
            .zip(&oracle)
            .map(|(x, o)| {
                let idx: Vec<usize> =
                    x.iter().zip(grid.spacing()).map(|(xi, h)| (xi / h).round() as usize).collect();
                (rhs.data()[grid.index_of(&idx)] - o.pressure_rhs).abs()
            })
            .fold(0.0, f64::max);
        errors.push(err);
        hs.push(grid.h_min());
    }
    let order = cbf_core::checks::observed_order(errors[0], errors[1], hs[0], hs[1]);
    assert!(order >= 3.5, "order {order}, errors {errors:?}");
    assert!(errors[1] < 1e-2 * scale);
}

#[test]
fn rhs_vanishes_on_flat_metric() {
    let grid = Grid::unit(vec![8, 8, 8, 1]).unwrap();
    let g = MetricField::flat(&grid);
    let bundle = CurvatureBundle::compute(&g, &CurvatureOptions::default());
    assert_eq!(pressure_rhs(&bundle).max_abs(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn negative_level_always_converges(seed in any::<u64>(), s0 in -20.0f64..-0.05) {
        let grid = Grid::unit(vec![16, 12, 1, 1]).unwrap();
        let g = warped(4).sample_to_grid(&grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prob = EllipticProblem {
            metric: &g,
            s0,
            rhs: random_field(&grid, &mut rng),
            initial_guess: None,
            stencil: Stencil::default(),
            options: PressureOptions::default(),
        };
        let sol = solve_pressure(&prob).unwrap();
        prop_assert!(sol.residual <= 1e-10);
        prop_assert!(sol.margin > 1e-8);
    }
}
