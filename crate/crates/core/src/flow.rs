//! Time integration of the conformal Bach flow and its variants, and the conformal
//! projection onto constant scalar curvature used to prepare initial data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curvature::{
    christoffel, covariant_derivative, map_covariant, ricci_scalar_schouten, riemann, CurvatureBundle,
    CurvatureOptions,
};
use crate::krylov::{gmres, minres, wdot, WeightedOperator};
use crate::mesh::{
    deterministic_sum, gradient_at, norm_sq_field, par_map_points, symmetrize2, MeshError, MetricField, Stencil,
    Symmetry, TensorField,
};
use crate::pressure::{apply_laplacian, laplace_beltrami, pressure_rhs, solve_pressure, EllipticProblem};
use crate::pressure::{PressureError, PressureOptions, PressureSolution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("metric lost positive definiteness at step {step}, t = {t:e} (point {point}, smallest eigenvalue {min_eigenvalue:e})")]
    SingularMetric { step: usize, t: f64, point: usize, min_eigenvalue: f64 },
    #[error("pressure solve failed: {0}")]
    PressureFailure(#[from] PressureError),
    #[error("constant scalar curvature projection diverged after {iterations} iterations (residual {residual:e})")]
    ProjectionDiverged { iterations: usize, residual: f64 },
    #[error("invalid flow state: {0}")]
    InvalidState(String),
}

impl FlowError {
    /// Stable name used in manifests and logs.
    pub fn kind(&self) -> &'static str {
        match self {
            FlowError::SingularMetric { .. } => "SingularMetric",
            FlowError::PressureFailure(PressureError::NoConvergence { .. }) => "NoConvergence",
            FlowError::PressureFailure(PressureError::NearSingularOperator { .. }) => "NearSingularOperator",
            FlowError::PressureFailure(PressureError::IncompatibleRHS { .. }) => "IncompatibleRHS",
            FlowError::ProjectionDiverged { .. } => "ProjectionDiverged",
            FlowError::InvalidState(_) => "InvalidState",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Cbf,
    ModifiedCbf,
    DeturckCbf,
    BhBach,
}

impl Variant {
    pub fn uses_pressure(self) -> bool {
        self != Variant::BhBach
    }

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Cbf => "cbf",
            Variant::ModifiedCbf => "modified_cbf",
            Variant::DeturckCbf => "deturck_cbf",
            Variant::BhBach => "bh_bach",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        [Variant::Cbf, Variant::ModifiedCbf, Variant::DeturckCbf, Variant::BhBach].into_iter().find(|v| v.tag() == tag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Rk2,
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepPolicy {
    pub scheme: Scheme,
    pub c_cfl: f64,
    pub t_end: f64,
    pub max_steps: usize,
    /// Overrides the CFL rule when set.
    pub dt: Option<f64>,
}

impl Default for StepPolicy {
    fn default() -> Self {
        Self { scheme: Scheme::Rk4, c_cfl: 0.05, t_end: f64::INFINITY, max_steps: 100, dt: None }
    }
}

impl StepPolicy {
    /// `c_cfl h_min^4 / max(1, sup|Rm|)` unless a fixed step is configured.
    pub fn dt_for(&self, h_min: f64, rm_sup: f64) -> f64 {
        self.dt.unwrap_or_else(|| self.c_cfl * h_min.powi(4) / rm_sup.max(1.0))
    }
}

/// Metric, level and (for pressure-coupled variants) the latest pressure.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub t: f64,
    pub step: usize,
    /// Step size used to reach this state (zero for the initial state).
    pub last_dt: f64,
    pub metric: MetricField,
    /// Pressure solved at `metric`, used as the warm start of the next solves.
    pub pressure: Option<TensorField>,
    pub s0: f64,
    pub variant: Variant,
    pub background: Option<MetricField>,
}

impl FlowState {
    pub fn new(metric: MetricField, s0: f64, variant: Variant, background: Option<MetricField>) -> Result<Self, FlowError> {
        match (variant, &background) {
            (Variant::DeturckCbf, None) => {
                return Err(FlowError::InvalidState("deturck_cbf needs a background metric".into()))
            }
            (Variant::DeturckCbf, Some(b)) if !b.grid().same_as(metric.grid()) => {
                return Err(FlowError::InvalidState("background metric lives on a different grid".into()))
            }
            (v, Some(_)) if v != Variant::DeturckCbf => {
                return Err(FlowError::InvalidState(format!("{} takes no background metric", v.tag())))
            }
            _ => {}
        }
        Ok(Self { t: 0.0, step: 0, last_dt: 0.0, metric, pressure: None, s0, variant, background })
    }
}

#[derive(Debug, Clone, Default)]
pub struct FlowOptions {
    pub stencil: Stencil,
    pub pressure: PressureOptions,
}

/// Everything evaluated at one metric: curvature, pressure and velocity.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub bundle: CurvatureBundle,
    pub pressure: Option<PressureSolution>,
    pub velocity: TensorField,
    /// `sup |Rm|_g`.
    pub rm_sup: f64,
}

/// `2(n-2)(B + p g)`.
pub fn velocity_cbf(bundle: &CurvatureBundle, p: &TensorField) -> TensorField {
    let n = bundle.dim();
    let c = 2.0 * (n as f64 - 2.0);
    combine(bundle, |pt, out| {
        let (b, g) = (bundle.b.at(pt), bundle.metric.g_at(pt));
        let pp = p.data()[pt];
        for k in 0..n * n {
            out[k] = c * (b[k] + pp * g[k]);
        }
    })
}

/// `2(n-2)(B + ΔS g / (2(n-1)(n-2)) + p g)`.
pub fn velocity_modified_cbf(bundle: &CurvatureBundle, p: &TensorField) -> TensorField {
    let n = bundle.dim() as f64;
    let lap_s = laplace_beltrami(&bundle.metric, &bundle.s, &bundle.stencil);
    velocity_cbf(bundle, p).axpy(1.0, &scalar_times_metric(&bundle.metric, &lap_s, 1.0 / (n - 1.0)))
}

/// `B + ΔS g / (2(n-1)(n-2))`, no pressure.
pub fn velocity_bh_bach(bundle: &CurvatureBundle) -> TensorField {
    let n = bundle.dim() as f64;
    let lap_s = laplace_beltrami(&bundle.metric, &bundle.s, &bundle.stencil);
    bundle.b.axpy(1.0, &scalar_times_metric(&bundle.metric, &lap_s, 1.0 / (2.0 * (n - 1.0) * (n - 2.0))))
}

fn scalar_times_metric(g: &MetricField, f: &TensorField, c: f64) -> TensorField {
    let n = g.dim();
    let data = par_map_points(g.grid().npoints(), n * n, |p, out| {
        let v = c * f.data()[p];
        for (o, gk) in out.iter_mut().zip(g.g_at(p)) {
            *o = v * gk;
        }
    });
    TensorField::from_data(g.grid(), 2, Symmetry::Symmetric, data)
}

fn combine<F: Fn(usize, &mut [f64]) + Sync>(bundle: &CurvatureBundle, f: F) -> TensorField {
    let n = bundle.dim();
    let data = par_map_points(bundle.grid().npoints(), n * n, f);
    TensorField::from_data(bundle.grid(), 2, Symmetry::Symmetric, data)
}

/// The DeTurck field with its index lowered:
/// `W_l = -g^ij (Δ T)_ijl + (n-2)/(2(n-1)) ∇_l S`, where `T_ijl = g_lk (Γ^k_ij - Γ̃^k_ij)`
/// and `Δ` is the rough Laplacian `g^ab ∇_a ∇_b`.
pub fn deturck_vector_field(bundle: &CurvatureBundle, background_gamma: &TensorField) -> TensorField {
    let g = &bundle.metric;
    let grid = g.grid().clone();
    let n = grid.dim();
    let st = &bundle.stencil;
    // Stored as [l][i][j].
    let tdata = par_map_points(grid.npoints(), n * n * n, |p, out| {
        let (gam, bg, gp) = (bundle.gamma.at(p), background_gamma.at(p), g.g_at(p));
        for l in 0..n {
            for ij in 0..n * n {
                out[l * n * n + ij] = (0..n).map(|k| gp[l * n + k] * (gam[k * n * n + ij] - bg[k * n * n + ij])).sum();
            }
        }
    });
    let t = TensorField::from_data(&grid, 3, Symmetry::None, tdata);
    let nt = covariant_derivative(&t, &bundle.gamma, st);
    let coef = (n as f64 - 2.0) / (2.0 * (n as f64 - 1.0));
    let data = map_covariant(&nt, &bundle.gamma, st, n, |p, nnt, out| {
        // nnt[a][b][l][i][j] = ∇_a ∇_b T_lij
        let ginv = g.inv_at(p);
        let mut ds = [0.0; 8];
        gradient_at(&bundle.s, st, p, &mut ds[..n]);
        for l in 0..n {
            let mut acc = 0.0;
            for a in 0..n {
                for b in 0..n {
                    let gab = ginv[a * n + b];
                    if gab == 0.0 {
                        continue;
                    }
                    for i in 0..n {
                        for j in 0..n {
                            acc += gab * ginv[i * n + j] * nnt[(((a * n + b) * n + l) * n + i) * n + j];
                        }
                    }
                }
            }
            out[l] = -acc + coef * ds[l];
        }
    });
    TensorField::from_data(&grid, 1, Symmetry::None, data)
}

/// `(L_W g)_ij = ∇_i W_j + ∇_j W_i` for a covector field `W`.
pub fn lie_derivative_of_metric(w: &TensorField, gamma: &TensorField, stencil: &Stencil) -> TensorField {
    let grid = w.grid().clone();
    let n = grid.dim();
    let mut out = covariant_derivative(w, gamma, stencil).into_data();
    out.chunks_mut(n * n).for_each(|c| {
        symmetrize2(n, c);
        c.iter_mut().for_each(|v| *v *= 2.0);
    });
    TensorField::from_data(&grid, 2, Symmetry::Symmetric, out)
}

/// Modified CBF velocity plus `L_W g` with `W` the DeTurck field.
pub fn velocity_deturck_cbf(bundle: &CurvatureBundle, p: &TensorField, background_gamma: &TensorField) -> TensorField {
    let w = deturck_vector_field(bundle, background_gamma);
    velocity_modified_cbf(bundle, p).axpy(1.0, &lie_derivative_of_metric(&w, &bundle.gamma, &bundle.stencil))
}

fn solve_for(
    bundle: &CurvatureBundle,
    s0: f64,
    warm: Option<&TensorField>,
    opts: &FlowOptions,
    probe: bool,
) -> Result<PressureSolution, PressureError> {
    let problem = EllipticProblem {
        metric: &bundle.metric,
        s0,
        rhs: pressure_rhs(bundle),
        initial_guess: warm,
        stencil: opts.stencil.clone(),
        options: PressureOptions { probe: probe && opts.pressure.probe, ..opts.pressure.clone() },
    };
    solve_pressure(&problem)
}

fn velocity_of(
    bundle: &CurvatureBundle,
    variant: Variant,
    p: Option<&TensorField>,
    background_gamma: Option<&TensorField>,
) -> TensorField {
    match variant {
        Variant::Cbf => velocity_cbf(bundle, p.expect("pressure")),
        Variant::ModifiedCbf => velocity_modified_cbf(bundle, p.expect("pressure")),
        Variant::DeturckCbf => velocity_deturck_cbf(bundle, p.expect("pressure"), background_gamma.expect("background")),
        Variant::BhBach => velocity_bh_bach(bundle),
    }
}

fn rm_sup(bundle: &CurvatureBundle) -> f64 {
    norm_sq_field(&bundle.rm, &bundle.metric).max_abs().sqrt()
}

fn curvature_options(opts: &FlowOptions) -> CurvatureOptions {
    CurvatureOptions { stencil: opts.stencil.clone(), weyl_form: false }
}

fn background_gamma(state: &FlowState, opts: &FlowOptions) -> Option<TensorField> {
    state.background.as_ref().map(|b| christoffel(b, &opts.stencil))
}

fn evaluate_metric(
    metric: &MetricField,
    state: &FlowState,
    bg: Option<&TensorField>,
    warm: Option<&TensorField>,
    opts: &FlowOptions,
    probe: bool,
) -> Result<Evaluation, FlowError> {
    let bundle = CurvatureBundle::compute(metric, &curvature_options(opts));
    let pressure = if state.variant.uses_pressure() {
        Some(solve_for(&bundle, state.s0, warm, opts, probe)?)
    } else {
        None
    };
    let velocity = velocity_of(&bundle, state.variant, pressure.as_ref().map(|s| &s.p), bg);
    let rm_sup = rm_sup(&bundle);
    Ok(Evaluation { bundle, pressure, velocity, rm_sup })
}

/// Curvature, pressure (warm-started from `state.pressure`, with the invertibility probe)
/// and velocity at the state's metric.
pub fn evaluate(state: &FlowState, opts: &FlowOptions) -> Result<Evaluation, FlowError> {
    evaluate_with_probe(state, opts, true)
}

/// Like [`evaluate`]; `probe = false` skips the Lanczos probe (the margin then only
/// reflects `||rhs|| / ||p||`).
pub fn evaluate_with_probe(state: &FlowState, opts: &FlowOptions, probe: bool) -> Result<Evaluation, FlowError> {
    let bg = background_gamma(state, opts);
    evaluate_metric(&state.metric, state, bg.as_ref(), state.pressure.as_ref(), opts, probe)
}

/// Rebuilds an [`Evaluation`] from a stored pressure solution without re-solving.
pub fn evaluation_with_pressure(
    state: &FlowState,
    pressure: Option<PressureSolution>,
    opts: &FlowOptions,
) -> Result<Evaluation, FlowError> {
    if state.variant.uses_pressure() != pressure.is_some() {
        return Err(FlowError::InvalidState("stored pressure does not match the flow variant".into()));
    }
    let bundle = CurvatureBundle::compute(&state.metric, &curvature_options(opts));
    let bg = background_gamma(state, opts);
    let velocity = velocity_of(&bundle, state.variant, pressure.as_ref().map(|s| &s.p), bg.as_ref());
    let rm_sup = rm_sup(&bundle);
    Ok(Evaluation { bundle, pressure, velocity, rm_sup })
}

/// One explicit Runge–Kutta step from `state`, whose evaluation is `eval`.
pub fn step_from(
    state: &FlowState,
    eval: &Evaluation,
    policy: &StepPolicy,
    opts: &FlowOptions,
) -> Result<FlowState, FlowError> {
    let grid = state.metric.grid();
    let mut dt = policy.dt_for(grid.h_min(), eval.rm_sup);
    if policy.t_end.is_finite() {
        dt = dt.min(policy.t_end - state.t);
    }
    if !(dt > 0.0) {
        return Err(FlowError::InvalidState(format!("non-positive time step {dt:e}")));
    }
    let bg = background_gamma(state, opts);
    let warm = eval.pressure.as_ref().map(|s| &s.p);
    let g0 = state.metric.tensor();
    let singular = |e: MeshError| match e {
        MeshError::NotPositiveDefinite { point, min_eigenvalue } => {
            FlowError::SingularMetric { step: state.step + 1, t: state.t + dt, point, min_eigenvalue }
        }
        other => FlowError::InvalidState(other.to_string()),
    };
    let stage = |k: &TensorField, c: f64| -> Result<TensorField, FlowError> {
        let gm = MetricField::new(g0.axpy(c * dt, k)).map_err(singular)?;
        Ok(evaluate_metric(&gm, state, bg.as_ref(), warm, opts, false)?.velocity)
    };
    let k1 = &eval.velocity;
    let update = match policy.scheme {
        Scheme::Rk2 => {
            let k2 = stage(k1, 1.0)?;
            k1.axpy(1.0, &k2).scaled(0.5 * dt)
        }
        Scheme::Rk4 => {
            let k2 = stage(k1, 0.5)?;
            let k3 = stage(&k2, 0.5)?;
            let k4 = stage(&k3, 1.0)?;
            k1.axpy(2.0, &k2).axpy(2.0, &k3).axpy(1.0, &k4).scaled(dt / 6.0)
        }
    };
    let metric = MetricField::new(g0.axpy(1.0, &update)).map_err(singular)?;
    Ok(FlowState {
        t: state.t + dt,
        step: state.step + 1,
        last_dt: dt,
        metric,
        pressure: eval.pressure.as_ref().map(|s| s.p.clone()),
        s0: state.s0,
        variant: state.variant,
        background: state.background.clone(),
    })
}

/// Evaluates `state` and takes one step.
pub fn step(state: &FlowState, policy: &StepPolicy, opts: &FlowOptions) -> Result<FlowState, FlowError> {
    let eval = evaluate(state, opts)?;
    step_from(state, &eval, policy, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    EndTime,
    MaxSteps,
    Error,
    Stopped,
}

#[derive(Debug)]
pub struct RunOutcome {
    /// Last state whose evaluation succeeded.
    pub state: FlowState,
    pub eval: Option<Evaluation>,
    pub termination: Termination,
    pub error: Option<FlowError>,
}

/// What the observer wants after a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Steps until `t_end` or `max_steps` (counted from step 0), calling `observer` on the
/// initial state (if `emit_initial`), every `cadence` steps, and on the final state.
/// The invertibility probe runs only on states that are recorded.
///
/// `initial_eval` skips re-evaluating the starting state (used on resume).
pub fn run<F>(
    initial: FlowState,
    initial_eval: Option<Evaluation>,
    policy: &StepPolicy,
    opts: &FlowOptions,
    cadence: usize,
    emit_initial: bool,
    mut observer: F,
) -> RunOutcome
where
    F: FnMut(&FlowState, &Evaluation) -> Control,
{
    let cadence = cadence.max(1);
    let mut state = initial;
    let mut eval = match initial_eval {
        Some(e) => e,
        None => match evaluate(&state, opts) {
            Ok(e) => e,
            Err(e) => return RunOutcome { state, eval: None, termination: Termination::Error, error: Some(e) },
        },
    };
    if emit_initial {
        if observer(&state, &eval) == Control::Stop {
            return RunOutcome { state, eval: Some(eval), termination: Termination::Stopped, error: None };
        }
    }
    let (termination, error) = loop {
        if state.t >= policy.t_end {
            break (Termination::EndTime, None);
        }
        if state.step >= policy.max_steps {
            break (Termination::MaxSteps, None);
        }
        let next = match step_from(&state, &eval, policy, opts) {
            Ok(s) => s,
            Err(e) => break (Termination::Error, Some(e)),
        };
        let last = next.t >= policy.t_end || next.step >= policy.max_steps;
        let record = next.step % cadence == 0 || last;
        let next_eval = match evaluate_with_probe(&next, opts, record) {
            Ok(e) => e,
            Err(e) => break (Termination::Error, Some(e)),
        };
        state = next;
        eval = next_eval;
        if record && observer(&state, &eval) == Control::Stop {
            break (Termination::Stopped, None);
        }
    };
    RunOutcome { state, eval: Some(eval), termination, error }
}

/// Target level of the projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarLevel {
    /// A prescribed constant `s0`.
    Fixed(f64),
    /// Whatever constant the conformal class admits at the input volume.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionOptions {
    pub tol: f64,
    pub max_newton: usize,
    /// Relative tolerance of the continuum-linearized (preconditioner) solves.
    pub linear_tol: f64,
    /// Relative tolerance of the Newton–Krylov (GMRES) solve of each Newton step.
    pub krylov_tol: f64,
    pub max_krylov: usize,
    pub max_halvings: usize,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_newton: 40, linear_tol: 1e-8, krylov_tol: 1e-6, max_krylov: 40, max_halvings: 8 }
    }
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub metric: MetricField,
    pub s0: f64,
    /// `g_out = exp(2u) g_in`.
    pub u: TensorField,
    pub iterations: usize,
    /// `sup |S(g_out) - s0|`.
    pub residual: f64,
}

fn scalar_curvature(g: &MetricField, stencil: &Stencil) -> TensorField {
    let gamma = christoffel(g, stencil);
    let rm = riemann(g, &gamma, stencil);
    ricci_scalar_schouten(g, &rm).1
}

fn mean_mu(f: &[f64], w: &[f64], volume: f64) -> f64 {
    wdot(w, f, &vec![1.0; f.len()]) / volume
}

/// `-c Δ + V`, optionally restricted to `μ`-mean-zero functions (identity on constants).
struct YamabeOperator<'a> {
    g: &'a MetricField,
    stencil: &'a Stencil,
    c: f64,
    potential: Vec<f64>,
    weights: Vec<f64>,
    volume: f64,
    mean_free: bool,
}

impl YamabeOperator<'_> {
    fn project(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let m = mean_mu(x, &self.weights, self.volume);
        (x.iter().map(|v| v - m).collect(), m)
    }
}

impl WeightedOperator for YamabeOperator<'_> {
    fn len(&self) -> usize {
        self.weights.len()
    }

    fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let (xp, m) = if self.mean_free { self.project(x) } else { (x.to_vec(), 0.0) };
        apply_laplacian(self.g, self.stencil, &xp, out);
        for ((o, v), xi) in out.iter_mut().zip(&self.potential).zip(&xp) {
            *o = -self.c * *o + v * xi;
        }
        if self.mean_free {
            let mo = mean_mu(out, &self.weights, self.volume);
            out.iter_mut().for_each(|o| *o += m - mo);
        }
    }
}

/// Conformal Newton iteration for `S(exp(2u) g_in) = s0`.
///
/// Each Newton step solves `J du = -(S - s0)` for the log-conformal correction `du` with
/// GMRES, where `J` is the exact derivative of the discrete scalar curvature (applied by
/// finite differences), preconditioned by the continuum linearization
/// `-4(n-1)/(n-2) Δ + S - s0 (n+2)/(n-2)` of the Yamabe equation. The update
/// `g <- exp(2 α du) g` halves `α` until `sup |S - s0|` decreases. With [`ScalarLevel::Auto`] the level is the `μ`-mean of
/// `S` at each iterate, the constant direction is removed from the correction, and the
/// result is rescaled to the input volume.
pub fn project_constant_scalar(
    g_in: &MetricField,
    level: ScalarLevel,
    stencil: &Stencil,
    opts: &ProjectionOptions,
) -> Result<Projection, FlowError> {
    let grid = g_in.grid().clone();
    let n = grid.dim() as f64;
    let c = 4.0 * (n - 1.0) / (n - 2.0);
    let expo = (n + 2.0) / (n - 2.0);
    let volume_in = g_in.volume();
    let mut g = g_in.clone();
    let mut u = vec![0.0; grid.npoints()];
    let mut s = scalar_curvature(&g, stencil);
    let level_of = |g: &MetricField, s: &TensorField| match level {
        ScalarLevel::Fixed(v) => v,
        ScalarLevel::Auto => mean_mu(s.data(), g.sqrt_det(), deterministic_sum(g.sqrt_det())),
    };
    let sup_res = |s: &TensorField, s0: f64| s.data().iter().fold(0.0f64, |m, v| m.max((v - s0).abs()));
    let mut s0 = level_of(&g, &s);
    let mut res = sup_res(&s, s0);
    let mean_free = matches!(level, ScalarLevel::Auto | ScalarLevel::Fixed(0.0));
    let mut iterations = 0;
    while res > opts.tol {
        if iterations >= opts.max_newton {
            return Err(FlowError::ProjectionDiverged { iterations, residual: res });
        }
        iterations += 1;
        let weights = g.sqrt_det().to_vec();
        let volume = deterministic_sum(&weights);
        let op = YamabeOperator {
            g: &g,
            stencil,
            c,
            potential: s.data().iter().map(|v| v - s0 * expo).collect(),
            weights,
            volume,
            mean_free,
        };
        let defect = |s_t: &TensorField, s0_t: f64| -> Vec<f64> {
            let d: Vec<f64> = s_t.data().iter().map(|v| v - s0_t).collect();
            if mean_free {
                op.project(&d).0
            } else {
                d
            }
        };
        let f0 = defect(&s, s0);
        let rhs: Vec<f64> = f0.iter().map(|v| -v).collect();
        // Directional derivative of the discrete defect in the log-conformal factor.
        let jacobian = |v: &[f64], out: &mut [f64]| {
            let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if vmax == 0.0 {
                out.fill(0.0);
                return;
            }
            let eps = 1e-7 / vmax;
            let dv = TensorField::from_data(&grid, 0, Symmetry::None, v.iter().map(|x| eps * x).collect());
            match g.conformal(&dv) {
                Ok(g_e) => {
                    let s_e = scalar_curvature(&g_e, stencil);
                    let f_e = defect(&s_e, level_of(&g_e, &s_e));
                    out.iter_mut().zip(f_e.iter().zip(&f0)).for_each(|(o, (a, b))| *o = (a - b) / eps);
                }
                Err(_) => out.fill(f64::NAN),
            }
        };
        // Continuum linearization: `d u = 2/(n-2) L^{-1} r`.
        let precondition = |r: &[f64], z: &mut [f64]| {
            let r = if mean_free { op.project(r).0 } else { r.to_vec() };
            let mut psi = vec![0.0; r.len()];
            minres(&op, &r, &mut psi, None, opts.linear_tol, 10 * grid.npoints());
            let psi = if mean_free { op.project(&psi).0 } else { psi };
            z.iter_mut().zip(&psi).for_each(|(zi, p)| *zi = 2.0 / (n - 2.0) * p);
        };
        let mut du = vec![0.0; rhs.len()];
        gmres(&op.weights, jacobian, precondition, &rhs, &mut du, opts.krylov_tol, opts.max_krylov, opts.max_krylov);
        if du.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::ProjectionDiverged { iterations, residual: res });
        }
        if mean_free {
            du = op.project(&du).0;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let step: Vec<f64> = du.iter().map(|v| alpha * v).collect();
            let duf = TensorField::from_data(&grid, 0, Symmetry::None, step.clone());
            if let Ok(g_try) = g.conformal(&duf) {
                let s_try = scalar_curvature(&g_try, stencil);
                let s0_try = level_of(&g_try, &s_try);
                let r_try = sup_res(&s_try, s0_try);
                if r_try < res {
                    accepted = Some((g_try, s_try, s0_try, r_try, step));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((g_new, s_new, s0_new, r_new, du)) = accepted else {
            return Err(FlowError::ProjectionDiverged { iterations, residual: res });
        };
        u.iter_mut().zip(&du).for_each(|(a, b)| *a += b);
        g = g_new;
        s = s_new;
        s0 = s0_new;
        res = r_new;
    }
    if level == ScalarLevel::Auto {
        let lambda = (volume_in / g.volume()).powf(2.0 / n);
        g = g.scaled(lambda).map_err(|e| FlowError::InvalidState(e.to_string()))?;
        u.iter_mut().for_each(|v| *v += 0.5 * lambda.ln());
        s = scalar_curvature(&g, stencil);
        s0 /= lambda;
        res = sup_res(&s, s0);
    }
    Ok(Projection {
        metric: g,
        s0,
        u: TensorField::from_data(&grid, 0, Symmetry::None, u),
        iterations,
        residual: res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Grid;
    use std::f64::consts::PI;

    #[test]
    fn variant_tags_round_trip() {
        for v in [Variant::Cbf, Variant::ModifiedCbf, Variant::DeturckCbf, Variant::BhBach] {
            assert_eq!(Variant::from_tag(v.tag()), Some(v));
        }
        assert_eq!(Variant::from_tag("ricci"), None);
    }

    #[test]
    fn flat_state_is_fixed() {
        let grid = Grid::unit(vec![6, 6, 1, 1]).unwrap();
        let g = MetricField::flat(&grid);
        for v in [Variant::Cbf, Variant::ModifiedCbf, Variant::BhBach] {
            let state = FlowState::new(g.clone(), 0.0, v, None).unwrap();
            let next = step(&state, &StepPolicy::default(), &FlowOptions::default()).unwrap();
            assert!(next.t > 0.0);
            assert_eq!(next.metric.tensor().data(), g.tensor().data());
        }
    }

    #[test]
    fn deturck_needs_background() {
        let grid = Grid::unit(vec![4, 4, 1, 1]).unwrap();
        let g = MetricField::flat(&grid);
        assert!(FlowState::new(g.clone(), 0.0, Variant::DeturckCbf, None).is_err());
        assert!(FlowState::new(g.clone(), 0.0, Variant::Cbf, Some(g)).is_err());
    }

    #[test]
    fn cfl_rule() {
        let p = StepPolicy::default();
        assert_eq!(p.dt_for(0.5, 0.2), 0.05 * 0.0625);
        assert_eq!(p.dt_for(0.5, 4.0), 0.05 * 0.0625 / 4.0);
    }

    #[test]
    fn flat_projection_is_identity() {
        let grid = Grid::unit(vec![8, 8, 1, 1]).unwrap();
        let g = MetricField::flat(&grid);
        let pr = project_constant_scalar(&g, ScalarLevel::Fixed(0.0), &Stencil::default(), &Default::default()).unwrap();
        assert_eq!(pr.iterations, 0);
        assert_eq!(pr.u.max_abs(), 0.0);
    }

    #[test]
    fn positive_level_on_flat_torus_diverges() {
        let grid = Grid::unit(vec![8, 8, 1, 1]).unwrap();
        let g = MetricField::flat(&grid);
        let r = project_constant_scalar(&g, ScalarLevel::Fixed(1.0), &Stencil::default(), &Default::default());
        assert!(matches!(r, Err(FlowError::ProjectionDiverged { .. })), "{r:?}");
    }

    #[test]
    fn lie_derivative_of_gradient_is_twice_hessian() {
        let grid = Grid::unit(vec![24, 24, 1, 1]).unwrap();
        let u = TensorField::scalar_from_fn(&grid, |x| 0.1 * (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).cos());
        let g = MetricField::flat(&grid).conformal(&u).unwrap();
        let st = Stencil::default();
        let gamma = christoffel(&g, &st);
        let f = TensorField::scalar_from_fn(&grid, |x| (2.0 * PI * (x[0] + x[1])).cos());
        let df = crate::mesh::gradient(&f, &st);
        let lie = lie_derivative_of_metric(&df, &gamma, &st);
        let hess = crate::curvature::hessian(&f, &gamma, &st);
        let err = lie.axpy(-2.0, &hess).max_abs();
        assert!(err < 1e-3 * hess.max_abs(), "{err}");
    }
}
