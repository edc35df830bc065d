//! Invariant suites behind `cbf verify`.

use std::fmt::Write as _;
use std::sync::Arc;

use cbf_core::checks::{conformal_invariance_defect, observed_order, refinement_study};
use cbf_core::curvature::{curvature_variation, CurvatureBundle, CurvatureOptions};
use cbf_core::flow::{
    evaluate, project_constant_scalar, run, step_from, Control, FlowOptions, FlowState, ScalarLevel, StepPolicy,
    Termination, Variant,
};
use cbf_core::krylov::WeightedOperator;
use cbf_core::mesh::{inner_mu, norms, Grid, MetricField, Stencil, StencilOrder, Symmetry, TensorField};
use cbf_core::oracle::{AnalyticMetric, FourierMode, FourierSeries, MetricFamily};
use cbf_core::pressure::{
    flat_laplacian_eigenvalue, solve_pressure, EllipticOperator, EllipticProblem, PreconditionerKind, PressureError,
    PressureOptions,
};

use crate::CliError;

pub const SUITES: &[&str] = &["curvature", "oracle", "pressure", "flow"];

/// Debug hooks that deliberately break a component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Curvature suites use an inconsistent derivative stencil.
    Stencil,
}

impl Fault {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stencil" => Some(Fault::Stencil),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub value: f64,
    /// Human-readable pass condition, e.g. `>= 3.5`.
    pub bound: String,
    pub pass: bool,
}

fn at_least(suite: &'static str, name: impl Into<String>, value: f64, min: f64) -> CheckResult {
    CheckResult { suite, name: name.into(), value, bound: format!(">= {min}"), pass: value >= min }
}

fn below(suite: &'static str, name: impl Into<String>, value: f64, max: f64) -> CheckResult {
    CheckResult { suite, name: name.into(), value, bound: format!("< {max:e}"), pass: value < max }
}

fn flag(suite: &'static str, name: impl Into<String>, ok: bool) -> CheckResult {
    CheckResult { suite, name: name.into(), value: ok as u8 as f64, bound: "= 1".into(), pass: ok }
}

/// Expands a selector (`all`, a suite name, or a comma-separated list).
pub fn parse_selector(sel: &str) -> Result<Vec<&'static str>, CliError> {
    let sel = sel.trim();
    if sel.is_empty() {
        return Err(CliError::Usage(format!("empty suite selector; choose from all, {}", SUITES.join(", "))));
    }
    if sel == "all" {
        return Ok(SUITES.to_vec());
    }
    sel.split(',')
        .map(|s| {
            let s = s.trim();
            SUITES
                .iter()
                .find(|&&k| k == s)
                .copied()
                .ok_or_else(|| CliError::Usage(format!("unknown suite {s:?}; choose from all, {}", SUITES.join(", "))))
        })
        .collect()
}

fn wave(dim: usize, a: i32, b: i32) -> Vec<i32> {
    let mut w = vec![0; dim];
    w[0] = a;
    w[1] = b;
    w
}

/// Doubly-warped test family used by every suite.
pub fn warped(dim: usize) -> AnalyticMetric {
    AnalyticMetric::unit(
        MetricFamily::DoublyWarped {
            split: 2,
            alpha: FourierSeries {
                modes: vec![
                    FourierMode { wave: wave(dim, 0, 1), amplitude: 0.1, phase: 0.3 },
                    FourierMode { wave: wave(dim, 1, 1), amplitude: 0.04, phase: 1.0 },
                ],
            },
            beta: FourierSeries::single(wave(dim, 1, 0), 0.08, -0.4),
        },
        dim,
    )
    .expect("valid family")
}

fn thin(dim: usize, n: usize) -> Vec<usize> {
    let mut s = vec![1; dim];
    s[0] = n;
    s[1] = n;
    s
}

fn thin_grid(n: usize) -> Arc<Grid> {
    Grid::unit(thin(4, n)).expect("grid")
}

fn suite_curvature(stencil: &Stencil) -> Vec<CheckResult> {
    const S: &str = "curvature";
    let mut out = Vec::new();
    match refinement_study(&warped(4), thin(4, 32), thin(4, 64), stencil) {
        Ok(study) => {
            for name in study.names() {
                if name == "bach_divergence_without_cotton" {
                    continue;
                }
                out.push(at_least(S, format!("order/{name}"), study.order(name), 3.5));
            }
        }
        Err(e) => out.push(CheckResult { suite: S, name: format!("study: {e}"), value: 0.0, bound: String::new(), pass: false }),
    }
    match refinement_study(&warped(5), thin(5, 32), thin(5, 64), stencil) {
        Ok(study) => {
            out.push(at_least(S, "order/bach_divergence_dim5", study.order("bach_divergence"), 3.5));
            let without = study.fine["bach_divergence_without_cotton"].relative();
            out.push(at_least(S, "cotton_term_visible_dim5", without, 1e-2));
        }
        Err(e) => out.push(CheckResult { suite: S, name: format!("study_dim5: {e}"), value: 0.0, bound: String::new(), pass: false }),
    }
    let flat = MetricField::flat(&Grid::unit(vec![6, 6, 6, 6]).expect("grid"));
    let b = CurvatureBundle::compute(&flat, &CurvatureOptions { stencil: stencil.clone(), weyl_form: false });
    out.push(below(S, "flat_zero/gamma", b.gamma.max_abs(), 1e-12));
    out.push(below(S, "flat_zero/rm", b.rm.max_abs(), 1e-12));
    out.push(below(S, "flat_zero/b", b.b.max_abs(), 1e-12));
    out
}

fn suite_oracle() -> Vec<CheckResult> {
    const S: &str = "oracle";
    let mut out = Vec::new();
    let u = FourierSeries::single(vec![1, 1, 0, 0], 0.05, 0.2);
    let st = Stencil::default();
    let e32 = conformal_invariance_defect(&warped(4), &u, &thin_grid(32), &st);
    let e64 = conformal_invariance_defect(&warped(4), &u, &thin_grid(64), &st);
    if let (Ok(a), Ok(b)) = (e32, e64) {
        out.push(at_least(S, "conformal_invariance_order", observed_order(a.error, b.error, 1.0 / 32.0, 1.0 / 64.0), 3.5));
        out.push(below(S, "conformal_invariance_relative", b.relative(), 1e-3));
    } else {
        out.push(flag(S, "conformal_invariance_sampling", false));
    }
    let families = [
        ("warped", warped(4)),
        (
            "conformally_flat",
            AnalyticMetric::unit(MetricFamily::ConformallyFlat { u: u.clone() }, 4).expect("family"),
        ),
        (
            "off_diagonal",
            AnalyticMetric::unit(
                MetricFamily::OffDiagonalPerturbation { amplitude: 0.2, axes: [0, 1], wave: vec![1, 1, 0, 0] },
                4,
            )
            .expect("family"),
        ),
    ];
    for (name, m) in families {
        let g = m.sample_to_grid(&thin_grid(16)).expect("sample");
        let b = CurvatureBundle::compute(&g, &CurvatureOptions::default());
        out.push(below(S, format!("bach_trace/{name}"), b.bach_trace_residual(), 1e-10));
    }
    out
}

fn suite_pressure() -> Vec<CheckResult> {
    const S: &str = "pressure";
    let mut out = Vec::new();
    let grid = thin_grid(48);
    let g = warped(4).sample_to_grid(&grid).expect("sample");
    let st = Stencil::default();
    let exact = TensorField::scalar_from_fn(&grid, |x| (std::f64::consts::TAU * x[0]).cos() + 0.5 * (std::f64::consts::TAU * x[1]).sin());
    let op = EllipticOperator::new(&g, -1.0, st.clone());
    let mut rhs = vec![0.0; grid.npoints()];
    op.apply(exact.data(), &mut rhs);
    for (name, kind) in [
        ("manufactured", PreconditionerKind::None),
        ("manufactured_jacobi", PreconditionerKind::Jacobi),
        ("manufactured_spectral", PreconditionerKind::Spectral),
    ] {
        let prob = EllipticProblem {
            metric: &g,
            s0: -1.0,
            rhs: TensorField::from_data(&grid, 0, Symmetry::None, rhs.clone()),
            initial_guess: None,
            stencil: st.clone(),
            options: PressureOptions { preconditioner: kind, ..Default::default() },
        };
        match solve_pressure(&prob) {
            Ok(sol) => {
                let d = sol.p.sub(&exact);
                let err = (inner_mu(&d, &d, &g) / inner_mu(&exact, &exact, &g)).sqrt();
                out.push(below(S, name, err, 1e-8));
            }
            Err(_) => out.push(flag(S, name, false)),
        }
    }
    let flat_grid = Grid::unit(vec![16, 16, 16, 16]).expect("grid");
    let flat = MetricField::flat(&flat_grid);
    let lambda = flat_laplacian_eigenvalue(&flat_grid, &st, &[1, 0, 0, 0]);
    let prob = EllipticProblem {
        metric: &flat,
        s0: lambda + 5e-7,
        rhs: TensorField::scalar_from_fn(&flat_grid, |x| (std::f64::consts::TAU * x[0]).sin() + x[1].cos()),
        initial_guess: None,
        stencil: st,
        options: PressureOptions::default(),
    };
    let near = matches!(solve_pressure(&prob), Err(PressureError::NearSingularOperator { .. }));
    out.push(flag(S, "near_singular_detected", near));
    out
}

/// Forward difference quotients `(Rm(step(g, dt)) - Rm(g)) / dt` for each `dt`, and the
/// first-variation prediction `δRm(v)` at `g`.
pub fn curvature_quotients(
    state: &FlowState,
    opts: &FlowOptions,
    dts: &[f64],
) -> Result<(Vec<TensorField>, TensorField), CliError> {
    let eval = evaluate(state, opts)?;
    let copts = CurvatureOptions { stencil: opts.stencil.clone(), weyl_form: false };
    let quotients = dts
        .iter()
        .map(|&dt| {
            let next = step_from(state, &eval, &StepPolicy { dt: Some(dt), ..Default::default() }, opts)?;
            let rm1 = CurvatureBundle::compute(&next.metric, &copts).rm;
            Ok(rm1.sub(&eval.bundle.rm).scaled(1.0 / dt))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok((quotients, curvature_variation(&eval.bundle, &eval.velocity)))
}

/// Flow-consistency measurements at `dt`, `dt/4`, `dt/16`.
#[derive(Debug, Clone)]
pub struct Consistency {
    /// `||Q(dt) - δRm|| / ||δRm||` for the three step sizes.
    pub total: [f64; 3],
    /// `||Q(dt) - Q(dt/4)|| / ||δRm||` and `||Q(dt/4) - Q(dt/16)|| / ||δRm||`: the
    /// dt-dependent part of the mismatch, free of the dt-independent stencil floor.
    pub dt_part: [f64; 2],
}

impl Consistency {
    /// Reduction of the dt-dependent part per 4x smaller step (4 for first order).
    pub fn dt_ratio(&self) -> f64 {
        self.dt_part[0] / self.dt_part[1]
    }
}

pub fn flow_consistency(state: &FlowState, opts: &FlowOptions, dt: f64) -> Result<Consistency, CliError> {
    let (q, dv) = curvature_quotients(state, opts, &[dt, dt / 4.0, dt / 16.0])?;
    let g = &state.metric;
    let scale = norms(&dv, g).l2;
    let rel = |t: &TensorField| norms(t, g).l2 / scale;
    Ok(Consistency {
        total: [rel(&q[0].sub(&dv)), rel(&q[1].sub(&dv)), rel(&q[2].sub(&dv))],
        dt_part: [rel(&q[0].sub(&q[1])), rel(&q[1].sub(&q[2]))],
    })
}

fn suite_flow() -> Vec<CheckResult> {
    const S: &str = "flow";
    let mut out = Vec::new();
    let opts = FlowOptions::default();
    let flat = MetricField::flat(&Grid::unit(vec![6, 6, 1, 1]).expect("grid"));
    let state = FlowState::new(flat.clone(), 0.0, Variant::Cbf, None).expect("state");
    let outcome = run(state, None, &StepPolicy { max_steps: 10, ..Default::default() }, &opts, 10, false, |_, _| {
        Control::Continue
    });
    let moved = outcome.state.metric.tensor().sub(flat.tensor()).max_abs();
    out.push(flag(S, "flat_run_completes", outcome.termination == Termination::MaxSteps));
    out.push(below(S, "flat_fixed_point", moved, 1e-12));

    let grid = thin_grid(32);
    let g = warped(4).sample_to_grid(&grid).expect("sample");
    match project_constant_scalar(&g, ScalarLevel::Auto, &opts.stencil, &Default::default()) {
        Ok(pr) => {
            out.push(below(S, "projection_residual", pr.residual, 1e-9));
            let state = FlowState::new(pr.metric, pr.s0, Variant::Cbf, None).expect("state");
            let rm = evaluate(&state, &opts).map(|e| e.rm_sup).unwrap_or(f64::NAN);
            let dt = StepPolicy::default().dt_for(grid.h_min(), rm);
            match flow_consistency(&state, &opts, dt) {
                Ok(c) => {
                    out.push(below(S, "flow_consistency", c.total[0], 0.1));
                    out.push(at_least(S, "flow_consistency_dt_ratio", c.dt_ratio(), 3.0));
                }
                Err(_) => out.push(flag(S, "flow_consistency", false)),
            }
        }
        Err(e) => out.push(flag(S, format!("projection_converges ({})", e.kind()), false)),
    }
    out
}

/// Runs the selected suites; the stencil fault only affects the curvature suite.
pub fn run_suites(suites: &[&str], fault: Option<Fault>) -> Vec<CheckResult> {
    let stencil = match fault {
        Some(Fault::Stencil) => Stencil::corrupted(StencilOrder::Fourth, 0.2),
        None => Stencil::default(),
    };
    let mut out = Vec::new();
    for &s in suites {
        out.extend(match s {
            "curvature" => suite_curvature(&stencil),
            "oracle" => suite_oracle(),
            "pressure" => suite_pressure(),
            "flow" => suite_flow(),
            _ => unreachable!("selector validated"),
        });
    }
    out
}

pub fn format_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.suite.len() + r.name.len() + 1).max().unwrap_or(10);
    let mut s = String::new();
    for r in results {
        let id = format!("{}/{}", r.suite, r.name);
        let _ = writeln!(
            s,
            "{:<width$}  {:>12.4e}  {:<10}  {}",
            id,
            r.value,
            r.bound,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    s
}

/// Prints the table and fails with the names of the failing checks.
pub fn cmd_verify(selector: &str, fault: Option<Fault>) -> Result<Vec<CheckResult>, CliError> {
    let suites = parse_selector(selector)?;
    let results = run_suites(&suites, fault);
    print!("{}", format_table(&results));
    let failed: Vec<String> =
        results.iter().filter(|r| !r.pass).map(|r| format!("{}/{}", r.suite, r.name)).collect();
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(CliError::Verify(failed))
    }
}
