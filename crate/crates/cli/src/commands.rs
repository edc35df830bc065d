//! `run`, `resume`, `project` and `curvature`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cbf_core::curvature::{CurvatureBundle, CurvatureOptions};
use cbf_core::diagnostics::{weyl_energy, Monitor};
use cbf_core::flow::{
    evaluate, evaluation_with_pressure, project_constant_scalar, run, Control, Evaluation, FlowState, ScalarLevel,
    Termination,
};
use cbf_core::mesh::{integrate, norms, MetricField, TensorField};
use serde::Serialize;

use crate::checkpoint::{fnv1a, Checkpoint, Sidecar, VERSION};
use crate::config::{Level, RunConfig};
use crate::output::{CsvLog, ErrorReport, Manifest, ProjectionReport, CSV_NAME};
use crate::CliError;

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn manifest_for(cfg: &RunConfig, command: &str) -> Manifest {
    Manifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.to_toml(),
        threads: rayon::current_num_threads(),
        ..Default::default()
    }
}

/// Writes the manifest whatever happened, then reports the outcome.
fn finish(dir: &Path, mut manifest: Manifest, start: Instant, result: Result<(), CliError>) -> Result<Manifest, CliError> {
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    if let Err(e) = &result {
        if manifest.error.is_none() {
            if let CliError::Numerical { kind, message } = e {
                manifest.error = Some(ErrorReport { kind: kind.clone(), message: message.clone() });
            }
        }
    }
    manifest.write(dir)?;
    result.map(|_| manifest)
}

fn input_error(key: &str, msg: String) -> CliError {
    CliError::Input(format!("{key}: {msg}"))
}

/// Initial state: sampled family, projected onto constant scalar curvature unless waived.
pub fn initial_state(cfg: &RunConfig, manifest: &mut Manifest) -> Result<FlowState, CliError> {
    let grid = cfg.grid();
    let g_in = cfg.initial_metric(&grid).map_err(|e| input_error("initial.family", e))?;
    let background = cfg.background_metric(&grid).map_err(|e| input_error("initial.background", e))?;
    let stencil = cfg.stencil();
    let (metric, s0) = if cfg.flow.project {
        let level = match cfg.flow.s0 {
            Level::Auto(_) => ScalarLevel::Auto,
            Level::Value(v) => ScalarLevel::Fixed(v),
        };
        let pr = project_constant_scalar(&g_in, level, &stencil, &cfg.projection)?;
        manifest.projection = Some(ProjectionReport { s0: pr.s0, iterations: pr.iterations, residual: pr.residual });
        (pr.metric, pr.s0)
    } else {
        let s0 = match cfg.flow.s0 {
            Level::Value(v) => v,
            Level::Auto(_) => {
                let s = CurvatureBundle::compute(&g_in, &CurvatureOptions { stencil, weyl_form: false }).s;
                integrate(&s, &g_in) / g_in.volume()
            }
        };
        (g_in, s0)
    };
    manifest.s0 = Some(s0);
    Ok(FlowState::new(metric, s0, cfg.flow.variant, background)?)
}

fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:08}.bin"))
}

fn save(path: &Path, state: &FlowState, eval: &Evaluation, monitor: &Monitor) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    // The pressure solved at this metric, not the warm start the state carries.
    let mut ck = Checkpoint::from_state(state);
    ck.pressure = eval.pressure.as_ref().map(|s| s.p.data().to_vec());
    ck.write(path)?;
    Sidecar::new(eval.pressure.as_ref(), monitor).write(path)?;
    Ok(())
}

/// Runs the trajectory from `state`, logging to `csv` and checkpointing as configured.
fn drive(
    cfg: &RunConfig,
    dir: &Path,
    state: FlowState,
    eval: Option<Evaluation>,
    mut monitor: Monitor,
    mut csv: CsvLog,
    emit_initial: bool,
    manifest: &mut Manifest,
) -> Result<(), CliError> {
    let every = cfg.output.checkpoint_every;
    let start_step = state.step;
    manifest.start_step = start_step;
    let mut io_error: Option<CliError> = None;
    let mut checkpoints = Vec::new();
    let outcome = run(state, eval, &cfg.step_policy(), &cfg.flow_options(), cfg.diagnostics.cadence, emit_initial, |s, e| {
        let row = monitor.record(s, e, None);
        let mut result = csv.write(&row).map_err(CliError::from);
        if result.is_ok() && every > 0 && s.step > start_step && s.step % every == 0 {
            let path = checkpoint_path(dir, s.step);
            result = save(&path, s, e, &monitor);
            checkpoints.push(path.display().to_string());
        }
        match result {
            Ok(()) => Control::Continue,
            Err(err) => {
                io_error = Some(err);
                Control::Stop
            }
        }
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    if let (Some(err), Some(eval)) = (&outcome.error, &outcome.eval) {
        let row = monitor.record(&outcome.state, eval, Some(err.kind()));
        csv.write(&row)?;
    }
    if let Some(eval) = &outcome.eval {
        let path = dir.join("checkpoints").join("final.bin");
        save(&path, &outcome.state, eval, &monitor)?;
        checkpoints.push(path.display().to_string());
    }
    manifest.termination = Some(outcome.termination);
    manifest.final_step = outcome.state.step;
    manifest.final_t = outcome.state.t;
    manifest.records = csv.rows;
    manifest.checkpoints = checkpoints;
    match outcome.error {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

/// Projects (unless waived) and runs the configured flow from the initial data.
pub fn cmd_run(cfg: &RunConfig, dir: &Path) -> Result<Manifest, CliError> {
    let start = Instant::now();
    prepare_dir(dir)?;
    let mut manifest = manifest_for(cfg, "run");
    let result = (|| {
        let state = initial_state(cfg, &mut manifest)?;
        let csv = CsvLog::create(&dir.join(CSV_NAME), cfg.diagnostics.m_max)?;
        let monitor = Monitor::new(cfg.diagnostics_config());
        drive(cfg, dir, state, None, monitor, csv, true, &mut manifest)
    })();
    if let Err(e) = &result {
        if manifest.termination.is_none() && matches!(e, CliError::Numerical { .. }) {
            manifest.termination = Some(Termination::Error);
        }
    }
    finish(dir, manifest, start, result)
}

/// Continues a run from a checkpoint written by `run`, `resume` or `project`.
///
/// An existing diagnostics log in `dir` is truncated after the checkpoint step and
/// extended, so the log matches the uninterrupted run.
pub fn cmd_resume(cfg: &RunConfig, dir: &Path, checkpoint: &Path) -> Result<Manifest, CliError> {
    let start = Instant::now();
    prepare_dir(dir)?;
    let mut manifest = manifest_for(cfg, "resume");
    manifest.resumed_from = Some(checkpoint.display().to_string());
    let result = (|| {
        let ck = Checkpoint::read(checkpoint)?;
        let sidecar = Sidecar::read(checkpoint)?;
        if ck.sizes != cfg.grid.sizes || ck.periods != cfg.periods() {
            return Err(CliError::Usage("checkpoint grid does not match [grid]".into()));
        }
        if ck.variant != cfg.flow.variant {
            return Err(CliError::Usage(format!(
                "checkpoint variant {} does not match flow.variant {}",
                ck.variant.tag(),
                cfg.flow.variant.tag()
            )));
        }
        if let Level::Value(v) = cfg.flow.s0 {
            if v != ck.s0 {
                return Err(CliError::Usage(format!("checkpoint s0 {} does not match flow.s0 {v}", ck.s0)));
            }
        }
        if sidecar.monitor.config.m_max != cfg.diagnostics.m_max {
            return Err(CliError::Usage("checkpoint m_max does not match diagnostics.m_max".into()));
        }
        let grid = ck.grid()?;
        let background = cfg.background_metric(&grid).map_err(|e| input_error("initial.background", e))?;
        let state = ck.to_state(background)?;
        let pressure = sidecar.pressure_solution(&state)?;
        let eval = evaluation_with_pressure(&state, pressure, &cfg.flow_options())?;
        manifest.s0 = Some(state.s0);
        let fresh = sidecar.monitor.k.is_none();
        let csv = if fresh {
            CsvLog::create(&dir.join(CSV_NAME), cfg.diagnostics.m_max)?
        } else {
            CsvLog::resume(&dir.join(CSV_NAME), cfg.diagnostics.m_max, state.step)?
        };
        drive(cfg, dir, state, Some(eval), sidecar.monitor, csv, fresh, &mut manifest)
    })();
    finish(dir, manifest, start, result)
}

/// Projects the initial data and stores it as a step-0 checkpoint (`projected.bin`).
pub fn cmd_project(cfg: &RunConfig, dir: &Path) -> Result<Manifest, CliError> {
    let start = Instant::now();
    prepare_dir(dir)?;
    let mut manifest = manifest_for(cfg, "project");
    let result = (|| {
        let state = initial_state(cfg, &mut manifest)?;
        let eval = evaluate(&state, &cfg.flow_options())?;
        let mut state = state;
        state.pressure = eval.pressure.as_ref().map(|s| s.p.clone());
        let path = dir.join("projected.bin");
        save(&path, &state, &eval, &Monitor::new(cfg.diagnostics_config()))?;
        manifest.checkpoints = vec![path.display().to_string()];
        Ok(())
    })();
    finish(dir, manifest, start, result)
}

#[derive(Debug, Clone, Serialize)]
pub struct NormPair {
    pub sup: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CurvatureReport {
    pub sizes: Vec<usize>,
    pub periods: Vec<f64>,
    pub h_min: f64,
    /// `sup` and `L2` norms measured with the metric (Christoffel symbols: components).
    pub norms: BTreeMap<&'static str, NormPair>,
    /// Relative identity residuals.
    pub residuals: BTreeMap<&'static str, f64>,
    pub weyl_energy: f64,
    pub scalar_min: f64,
    pub scalar_max: f64,
}

fn sup_of(f: &TensorField) -> f64 {
    f.max_abs()
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        a
    }
}

pub fn curvature_report(g: &MetricField, bundle: &CurvatureBundle) -> CurvatureReport {
    let grid = g.grid();
    let mut out = BTreeMap::new();
    let gamma_l2 = {
        let sq: Vec<f64> = (0..grid.npoints()).map(|p| bundle.gamma.at(p).iter().map(|v| v * v).sum()).collect();
        let f = TensorField::from_data(grid, 0, cbf_core::mesh::Symmetry::None, sq);
        integrate(&f, g).max(0.0).sqrt()
    };
    out.insert("gamma", NormPair { sup: sup_of(&bundle.gamma), l2: gamma_l2 });
    for (name, t) in [
        ("rm", &bundle.rm),
        ("rc", &bundle.rc),
        ("s", &bundle.s),
        ("a", &bundle.a),
        ("w", &bundle.w),
        ("c", &bundle.c),
        ("b", &bundle.b),
    ] {
        let n = norms(t, g);
        out.insert(name, NormPair { sup: n.sup, l2: n.l2 });
    }
    let b_sup = out["b"].sup;
    let mut residuals = BTreeMap::new();
    residuals.insert("bach_trace", bundle.bach_trace_residual());
    residuals.insert("bach_divergence", ratio(sup_of(&bundle.bach_divergence_residual(true)), b_sup));
    if let Some(cw) = bundle.cotton_weyl_residual() {
        residuals.insert("cotton_weyl", ratio(sup_of(&cw), out["c"].sup));
    }
    if let Some(alt) = &bundle.b_alt {
        residuals.insert("dual_bach", ratio(sup_of(&bundle.b.sub(alt)), b_sup));
    }
    let s = bundle.s.data();
    CurvatureReport {
        sizes: grid.sizes().to_vec(),
        periods: grid.periods().to_vec(),
        h_min: grid.h_min(),
        norms: out,
        residuals,
        weyl_energy: weyl_energy(bundle),
        scalar_min: s.iter().copied().fold(f64::INFINITY, f64::min),
        scalar_max: s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Writes one field as a frame: `"CBFFIELD"`, version, `n`, sizes, periods, rank,
/// component count, point-major components, FNV-1a checksum (little-endian throughout).
pub fn write_field(path: &Path, f: &TensorField) -> Result<(), CliError> {
    let grid = f.grid();
    let mut b = Vec::new();
    b.extend_from_slice(b"CBFFIELD");
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(grid.dim() as u32).to_le_bytes());
    for &s in grid.sizes() {
        b.extend_from_slice(&(s as u64).to_le_bytes());
    }
    for &l in grid.periods() {
        b.extend_from_slice(&l.to_le_bytes());
    }
    b.extend_from_slice(&(f.rank() as u32).to_le_bytes());
    b.extend_from_slice(&(f.ncomp() as u32).to_le_bytes());
    for v in f.data() {
        b.extend_from_slice(&v.to_le_bytes());
    }
    let sum = fnv1a(&b);
    b.extend_from_slice(&sum.to_le_bytes());
    std::fs::File::create(path)?.write_all(&b)?;
    Ok(())
}

/// One curvature evaluation of the configured initial data (no projection).
pub fn cmd_curvature(cfg: &RunConfig, dir: &Path) -> Result<CurvatureReport, CliError> {
    prepare_dir(dir)?;
    let grid = cfg.grid();
    let g = cfg.initial_metric(&grid).map_err(|e| input_error("initial.family", e))?;
    let bundle = CurvatureBundle::compute(&g, &CurvatureOptions::with_weyl_form(cfg.stencil()));
    let report = curvature_report(&g, &bundle);
    let text = serde_json::to_string_pretty(&report).map_err(std::io::Error::other)?;
    std::fs::write(dir.join("curvature.json"), text + "\n")?;
    if cfg.output.full_fields {
        let fdir = dir.join("fields");
        std::fs::create_dir_all(&fdir)?;
        Checkpoint::from_state(&FlowState::new(g.clone(), 0.0, cbf_core::flow::Variant::BhBach, None)?)
            .write(&fdir.join("metric.bin"))?;
        for (name, t) in [
            ("gamma", &bundle.gamma),
            ("rm", &bundle.rm),
            ("rc", &bundle.rc),
            ("s", &bundle.s),
            ("a", &bundle.a),
            ("w", &bundle.w),
            ("c", &bundle.c),
            ("b", &bundle.b),
        ] {
            write_field(&fdir.join(format!("{name}.bin")), t)?;
        }
    }
    Ok(report)
}
