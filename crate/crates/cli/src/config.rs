//! Run configuration: a sectioned TOML file with typed keys and documented defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cbf_core::diagnostics::DiagnosticsConfig;
use cbf_core::flow::{FlowOptions, ProjectionOptions, Scheme, StepPolicy, Variant};
use cbf_core::mesh::{Grid, MetricField, Stencil, StencilOrder};
use cbf_core::oracle::{AnalyticMetric, FourierMode, FourierSeries, MetricFamily};
use cbf_core::pressure::PressureOptions;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Largest supported dimension (per-point scratch buffers are sized for it).
pub const MAX_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the random initial perturbation, if any.
    #[serde(default)]
    pub seed: u64,
    pub grid: GridConfig,
    pub initial: InitialConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub pressure: PressureOptions,
    #[serde(default)]
    pub projection: ProjectionOptions,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Points per axis; its length is the dimension. Axes of size 1 are inactive.
    pub sizes: Vec<usize>,
    /// Axis periods, all 1 when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub periods: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub family: MetricFamily,
    /// Random conformal factor `exp(2u)` applied on top of `family`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<RandomPerturbation>,
    /// Background metric for `deturck_cbf`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<MetricFamily>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomPerturbation {
    pub modes: usize,
    /// Sup bound of `u`.
    pub amplitude: f64,
    #[serde(default = "default_max_wave")]
    pub max_wave: i32,
}

fn default_max_wave() -> i32 {
    2
}

/// `s0 = "auto"` or a number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Level {
    Auto(AutoTag),
    Value(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AutoTag {
    #[serde(rename = "auto")]
    Auto,
}

impl Default for Level {
    fn default() -> Self {
        Level::Auto(AutoTag::Auto)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub variant: Variant,
    pub s0: Level,
    /// Project the initial data onto constant scalar curvature before flowing.
    pub project: bool,
    pub scheme: Scheme,
    pub c_cfl: f64,
    pub t_end: f64,
    pub max_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Accuracy order of the derivative stencil (2 or 4).
    pub stencil_order: u32,
}

impl Default for FlowConfig {
    fn default() -> Self {
        let p = StepPolicy::default();
        Self {
            variant: Variant::Cbf,
            s0: Level::default(),
            project: true,
            scheme: p.scheme,
            c_cfl: p.c_cfl,
            t_end: p.t_end,
            max_steps: p.max_steps,
            dt: p.dt,
            stencil_order: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsSection {
    /// Record every `cadence` steps (the final state is always recorded).
    pub cadence: usize,
    pub m_max: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curvature_bound: Option<f64>,
    pub curvature_factor: f64,
    pub margin_floor: f64,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        let d = DiagnosticsConfig::default();
        Self {
            cadence: 1,
            m_max: d.m_max,
            curvature_bound: d.curvature_bound,
            curvature_factor: d.curvature_factor,
            margin_floor: d.margin_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write a checkpoint every this many steps (0 disables; must be a multiple of the cadence).
    pub checkpoint_every: usize,
    /// `curvature` also dumps every field in the binary frame layout.
    pub full_fields: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), checkpoint_every: 0, full_fields: false }
    }
}

/// A configuration problem, anchored to the offending line when it can be located.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub line: Option<usize>,
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: ", self.path, l)?,
            None => write!(f, "{}: ", self.path)?,
        }
        if !self.key.is_empty() {
            write!(f, "{}: ", self.key)?;
        }
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for ConfigError {}

/// Finds the 1-based line defining dotted `key` (a `[section]` header or a `name =` line).
pub fn locate_key(text: &str, key: &str) -> Option<usize> {
    let (section, name) = match key.rsplit_once('.') {
        Some((s, n)) => (s, n),
        None => ("", key),
    };
    let mut current = String::new();
    let mut section_line = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[') {
            current = h.trim_start_matches('[').trim_end_matches(']').trim().to_string();
            if current == key {
                return Some(i + 1);
            }
            if current == section {
                section_line = Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim().trim_matches('"') == name {
                    return Some(i + 1);
                }
            }
        }
    }
    section_line
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let name = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: name.clone(),
            line: None,
            key: String::new(),
            message: format!("cannot read: {e}"),
        })?;
        Self::parse(&text, &name)
    }

    /// Parses and validates; `name` labels error messages.
    pub fn parse(text: &str, name: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError {
            path: name.to_string(),
            line: e.span().map(|s| line_of_offset(text, s.start)),
            key: String::new(),
            message: e.message().to_string(),
        })?;
        cfg.validate().map_err(|(key, message)| ConfigError {
            path: name.to_string(),
            line: locate_key(text, &key),
            key,
            message,
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dim(&self) -> usize {
        self.grid.sizes.len()
    }

    pub fn periods(&self) -> Vec<f64> {
        self.grid.periods.clone().unwrap_or_else(|| vec![1.0; self.dim()])
    }

    /// Checks every semantic constraint; returns the dotted key at fault.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let err = |k: &str, m: String| Err((k.to_string(), m));
        let n = self.dim();
        if !(4..=MAX_DIM).contains(&n) {
            return err("grid.sizes", format!("dimension must be between 4 and {MAX_DIM}, got {n}"));
        }
        if self.grid.sizes.iter().any(|&s| s == 0) {
            return err("grid.sizes", "axis sizes must be positive".into());
        }
        if let Some(p) = &self.grid.periods {
            if p.len() != n {
                return err("grid.periods", format!("expected {n} periods, got {}", p.len()));
            }
            if p.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
                return err("grid.periods", "periods must be positive and finite".into());
            }
        }
        if let Err(e) = self.initial.family.validate(n) {
            return err("initial.family", e.to_string());
        }
        if let Some(p) = &self.initial.perturbation {
            if p.modes == 0 || !(p.amplitude.abs() < 1.0) || p.max_wave < 1 {
                return err(
                    "initial.perturbation",
                    "needs modes >= 1, |amplitude| < 1 and max_wave >= 1".into(),
                );
            }
        }
        match (self.flow.variant, &self.initial.background) {
            (Variant::DeturckCbf, None) => {
                return err("flow.variant", "deturck_cbf needs [initial.background]".into())
            }
            (v, Some(_)) if v != Variant::DeturckCbf => {
                return err("initial.background", format!("{} takes no background metric", v.tag()))
            }
            (_, Some(b)) => {
                if let Err(e) = b.validate(n) {
                    return err("initial.background", e.to_string());
                }
            }
            _ => {}
        }
        let f = &self.flow;
        if StencilOrder::from_int(f.stencil_order).is_none() {
            return err("flow.stencil_order", format!("must be 2 or 4, got {}", f.stencil_order));
        }
        if !(f.c_cfl > 0.0 && f.c_cfl.is_finite()) {
            return err("flow.c_cfl", "must be positive".into());
        }
        if f.t_end.is_nan() || f.t_end < 0.0 {
            return err("flow.t_end", "must be non-negative".into());
        }
        if let Some(dt) = f.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return err("flow.dt", "must be positive".into());
            }
        }
        if let Level::Value(v) = f.s0 {
            if !v.is_finite() {
                return err("flow.s0", "must be finite or \"auto\"".into());
            }
        }
        let p = &self.pressure;
        if !(p.tol > 0.0) || !(p.compat_tol > 0.0) || !(p.eps_inv > 0.0) {
            return err("pressure", "tol, compat_tol and eps_inv must be positive".into());
        }
        let pr = &self.projection;
        if !(pr.tol > 0.0) || !(pr.linear_tol > 0.0) || pr.max_newton == 0 {
            return err("projection", "tol and linear_tol must be positive, max_newton >= 1".into());
        }
        let d = &self.diagnostics;
        if d.cadence == 0 {
            return err("diagnostics.cadence", "must be at least 1".into());
        }
        if !(1..=4).contains(&d.m_max) {
            return err("diagnostics.m_max", format!("must be between 1 and 4, got {}", d.m_max));
        }
        if let Some(k) = d.curvature_bound {
            if !(k > 0.0) {
                return err("diagnostics.curvature_bound", "must be positive".into());
            }
        }
        let every = self.output.checkpoint_every;
        if every > 0 && every % d.cadence != 0 {
            return err(
                "output.checkpoint_every",
                format!("must be a multiple of diagnostics.cadence ({})", d.cadence),
            );
        }
        Ok(())
    }

    pub fn grid(&self) -> Arc<Grid> {
        Grid::new(self.grid.sizes.clone(), self.periods()).expect("validated grid")
    }

    pub fn stencil(&self) -> Stencil {
        Stencil::central(StencilOrder::from_int(self.flow.stencil_order).expect("validated order"))
    }

    pub fn step_policy(&self) -> StepPolicy {
        let f = &self.flow;
        StepPolicy { scheme: f.scheme, c_cfl: f.c_cfl, t_end: f.t_end, max_steps: f.max_steps, dt: f.dt }
    }

    pub fn flow_options(&self) -> FlowOptions {
        FlowOptions { stencil: self.stencil(), pressure: self.pressure.clone() }
    }

    pub fn diagnostics_config(&self) -> DiagnosticsConfig {
        let d = &self.diagnostics;
        DiagnosticsConfig {
            m_max: d.m_max,
            curvature_bound: d.curvature_bound,
            curvature_factor: d.curvature_factor,
            margin_floor: d.margin_floor,
        }
    }

    /// The initial-data family including the seeded random perturbation.
    pub fn initial_family(&self) -> MetricFamily {
        let base = self.initial.family.clone();
        let Some(p) = &self.initial.perturbation else { return base };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let active: Vec<usize> = (0..self.dim()).filter(|&a| self.grid.sizes[a] > 1).collect();
        let modes = (0..p.modes)
            .map(|_| {
                let mut wave = vec![0; self.dim()];
                loop {
                    for &a in &active {
                        wave[a] = rng.random_range(-p.max_wave..=p.max_wave);
                    }
                    if wave.iter().any(|&k| k != 0) || active.is_empty() {
                        break;
                    }
                }
                FourierMode {
                    wave,
                    amplitude: p.amplitude / p.modes as f64 * rng.random_range(-1.0..1.0),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                }
            })
            .collect();
        MetricFamily::Conformal { u: FourierSeries { modes }, base: Box::new(base) }
    }

    pub fn initial_metric(&self, grid: &Arc<Grid>) -> Result<MetricField, String> {
        sample_family(self.initial_family(), self.periods(), grid)
    }

    pub fn background_metric(&self, grid: &Arc<Grid>) -> Result<Option<MetricField>, String> {
        self.initial.background.clone().map(|b| sample_family(b, self.periods(), grid)).transpose()
    }
}

fn sample_family(family: MetricFamily, periods: Vec<f64>, grid: &Arc<Grid>) -> Result<MetricField, String> {
    AnalyticMetric::new(family, periods)
        .and_then(|m| m.sample_to_grid(grid))
        .map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 3

[grid]
sizes = [8, 8, 1, 1]

[initial.family]
kind = "doubly_warped"
split = 2
alpha = [{ wave = [0, 1, 0, 0], amplitude = 0.05, phase = 0.3 }]
beta = [{ wave = [1, 0, 0, 0], amplitude = 0.05 }]

[flow]
variant = "cbf"
s0 = "auto"
max_steps = 10
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = RunConfig::parse(SAMPLE, "t.toml").unwrap();
        assert_eq!(cfg.flow.max_steps, 10);
        assert_eq!(cfg.flow.s0, Level::Auto(AutoTag::Auto));
        assert_eq!(cfg.flow.t_end, f64::INFINITY);
        let again = RunConfig::parse(&cfg.to_toml(), "echo").unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn numeric_level_round_trips() {
        let text = SAMPLE.replace("s0 = \"auto\"", "s0 = -0.25");
        let cfg = RunConfig::parse(&text, "t.toml").unwrap();
        assert_eq!(cfg.flow.s0, Level::Value(-0.25));
        assert_eq!(RunConfig::parse(&cfg.to_toml(), "echo").unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_line() {
        let text = SAMPLE.replace("variant = \"cbf\"", "variant = \"ricci\"");
        let e = RunConfig::parse(&text, "t.toml").unwrap_err();
        assert_eq!(e.line, Some(14), "{e}");
        let text = SAMPLE.replace("max_steps = 10", "max_steps = 10\nstencil_order = 3");
        let e = RunConfig::parse(&text, "t.toml").unwrap_err();
        assert_eq!(e.line, Some(17));
        assert!(e.to_string().starts_with("t.toml:17: flow.stencil_order:"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = SAMPLE.replace("max_steps = 10", "max_step = 10");
        let e = RunConfig::parse(&text, "t.toml").unwrap_err();
        assert_eq!(e.line, Some(16), "{e}");
    }

    #[test]
    fn deturck_needs_background() {
        let text = SAMPLE.replace("variant = \"cbf\"", "variant = \"deturck_cbf\"");
        let e = RunConfig::parse(&text, "t.toml").unwrap_err();
        assert_eq!(e.key, "flow.variant");
    }

    #[test]
    fn perturbation_is_seeded() {
        let text = format!("{SAMPLE}\n[initial.perturbation]\nmodes = 3\namplitude = 0.05\n");
        let a = RunConfig::parse(&text, "t").unwrap();
        let mut b = a.clone();
        assert_eq!(a.initial_family(), b.initial_family());
        b.seed = 4;
        assert_ne!(a.initial_family(), b.initial_family());
        let MetricFamily::Conformal { u, .. } = a.initial_family() else { panic!() };
        assert!(u.modes.iter().all(|m| m.wave[2] == 0 && m.wave[3] == 0));
    }
}
