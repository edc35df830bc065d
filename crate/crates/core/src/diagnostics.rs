//! Monitored quantities along a run: constraint drift, identity residuals, Weyl energy,
//! Shi-type derivative ratios, `f_m`, and the extension-criterion status.

use serde::{Deserialize, Serialize};

use crate::curvature::CurvatureBundle;
use crate::flow::{Evaluation, FlowState};
use crate::mesh::{integrate, norm_sq_field, norms, TensorField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Highest derivative order of the Shi monitors.
    pub m_max: usize,
    /// Bound on `sup(|Rm| + |p|)`; when absent, `curvature_factor` times the first-record value.
    pub curvature_bound: Option<f64>,
    pub curvature_factor: f64,
    /// Floor on the pressure-operator invertibility margin.
    pub margin_floor: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { m_max: 2, curvature_bound: None, curvature_factor: 100.0, margin_floor: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionStatus {
    /// Running max of `sup(|Rm| + |p|)`.
    pub k_observed: f64,
    pub margin: f64,
    pub within_bounds: bool,
    /// Name of the violated condition, if any.
    pub violation: Option<String>,
}

impl ExtensionStatus {
    /// `ok`, or `violated:<condition>`.
    pub fn label(&self) -> String {
        match &self.violation {
            None => "ok".to_string(),
            Some(v) => format!("violated:{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsRecord {
    pub step: usize,
    pub t: f64,
    pub dt: f64,
    pub scalar_drift: f64,
    pub bach_trace_residual: f64,
    pub bach_divergence_residual: f64,
    pub weyl_energy: f64,
    pub rm_sup: f64,
    pub p_sup: f64,
    pub rm_l2: f64,
    pub p_l2: f64,
    pub shi_l2: Vec<f64>,
    pub shi_ptwise: Vec<f64>,
    pub f_m_sup: f64,
    pub min_metric_eigenvalue: f64,
    pub pressure_iterations: usize,
    pub pressure_residual: f64,
    pub invertibility_margin: f64,
    pub extension: ExtensionStatus,
}

/// CSV header for `m_max` Shi orders.
pub fn csv_header(m_max: usize) -> String {
    let mut cols: Vec<String> = [
        "step",
        "t",
        "dt",
        "scalar_drift",
        "bach_trace_residual",
        "bach_divergence_residual",
        "weyl_energy",
        "rm_sup",
        "p_sup",
        "rm_l2",
        "p_l2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend((1..=m_max).map(|m| format!("shi_l2_{m}")));
    cols.extend((1..=m_max).map(|m| format!("shi_ptwise_{m}")));
    cols.extend(
        [
            "f_m_sup",
            "min_metric_eigenvalue",
            "pressure_iterations",
            "pressure_residual",
            "invertibility_margin",
            "extension_status",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    cols.join(",")
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

impl DiagnosticsRecord {
    /// One CSV row, floats with 17 significant digits.
    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.step.to_string()];
        cols.extend(
            [
                self.t,
                self.dt,
                self.scalar_drift,
                self.bach_trace_residual,
                self.bach_divergence_residual,
                self.weyl_energy,
                self.rm_sup,
                self.p_sup,
                self.rm_l2,
                self.p_l2,
            ]
            .map(num),
        );
        cols.extend(self.shi_l2.iter().map(|&v| num(v)));
        cols.extend(self.shi_ptwise.iter().map(|&v| num(v)));
        cols.push(num(self.f_m_sup));
        cols.push(num(self.min_metric_eigenvalue));
        cols.push(self.pressure_iterations.to_string());
        cols.push(num(self.pressure_residual));
        cols.push(num(self.invertibility_margin));
        cols.push(self.extension.label());
        cols.join(",")
    }
}

/// `∫ |W|^2 dμ`.
pub fn weyl_energy(bundle: &CurvatureBundle) -> f64 {
    integrate(&norm_sq_field(&bundle.w, &bundle.metric), &bundle.metric)
}

/// `t^{m/2} ∫ |∇^m Rm|^2 dμ`.
pub fn shi_l2_monitor(bundle: &CurvatureBundle, m: usize, t: f64) -> f64 {
    let d = bundle.rm_derivative_norms(m).pop().expect("m >= 1");
    shi_l2_from(&d, bundle, m, t)
}

fn shi_l2_from(norm_sq: &TensorField, bundle: &CurvatureBundle, m: usize, t: f64) -> f64 {
    if t == 0.0 {
        return 0.0;
    }
    t.powf(m as f64 / 2.0) * integrate(norm_sq, &bundle.metric)
}

/// `sup |∇^m Rm| / (K + t^{-1/2})^{1 + m/2}`.
pub fn shi_pointwise_monitor(bundle: &CurvatureBundle, m: usize, t: f64, k: f64) -> f64 {
    let d = bundle.rm_derivative_norms(m).pop().expect("m >= 1");
    shi_ptwise_from(&d, m, t, k)
}

fn shi_ptwise_from(norm_sq: &TensorField, m: usize, t: f64, k: f64) -> f64 {
    if t == 0.0 {
        return 0.0;
    }
    norm_sq.max_abs().sqrt() / (k + t.powf(-0.5)).powf(1.0 + m as f64 / 2.0)
}

/// `f_m = sum_{j=1..m} |∇^j Rm|^{2/(2+j)}` pointwise.
pub fn f_m_field(bundle: &CurvatureBundle, m: usize) -> TensorField {
    f_m_from(&bundle.rm_derivative_norms(m))
}

fn f_m_from(norm_sq: &[TensorField]) -> TensorField {
    let mut out = vec![0.0; norm_sq[0].data().len()];
    for (j, d) in norm_sq.iter().enumerate() {
        let e = 1.0 / (3.0 + j as f64);
        out.iter_mut().zip(d.data()).for_each(|(o, v)| *o += v.max(0.0).powf(e));
    }
    TensorField::from_data(norm_sq[0].grid(), 0, crate::mesh::Symmetry::None, out)
}

fn sup_rm_plus_p(eval: &Evaluation) -> f64 {
    let rm = norm_sq_field(&eval.bundle.rm, &eval.bundle.metric);
    let p = eval.pressure.as_ref().map(|s| s.p.data());
    rm.data()
        .iter()
        .enumerate()
        .map(|(i, v)| v.sqrt() + p.map_or(0.0, |p| p[i].abs()))
        .fold(0.0, f64::max)
}

/// Running state of the monitors across the records of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monitor {
    pub config: DiagnosticsConfig,
    /// `K`: `sup(|Rm| + |p|)` at the first record.
    pub k: Option<f64>,
    pub k_observed: f64,
    /// `∫ |Rm|^2 dμ` at the first record, the Shi L2 normalization.
    pub rm0_l2_sq: Option<f64>,
}

impl Monitor {
    pub fn new(config: DiagnosticsConfig) -> Self {
        Self { config, k: None, k_observed: 0.0, rm0_l2_sq: None }
    }

    /// Builds the record for `(state, eval)` and advances the running quantities.
    /// `failure` names a terminal error to flag on this record.
    pub fn record(&mut self, state: &FlowState, eval: &Evaluation, failure: Option<&str>) -> DiagnosticsRecord {
        let b = &eval.bundle;
        let g = &b.metric;
        let rm_norm_sq = norm_sq_field(&b.rm, g);
        let kk = sup_rm_plus_p(eval);
        let k = *self.k.get_or_insert(kk);
        self.k_observed = self.k_observed.max(kk);
        let rm_l2_sq = integrate(&rm_norm_sq, g);
        self.rm0_l2_sq.get_or_insert(rm_l2_sq);
        let m_max = self.config.m_max;
        let derivs = if m_max > 0 { b.rm_derivative_norms(m_max) } else { Vec::new() };
        let shi_l2 = (1..=m_max).map(|m| shi_l2_from(&derivs[m - 1], b, m, state.t)).collect();
        let shi_ptwise = (1..=m_max).map(|m| shi_ptwise_from(&derivs[m - 1], m, state.t, k)).collect();
        let f_m_sup = if m_max > 0 { f_m_from(&derivs).max_abs() } else { 0.0 };
        let (p_sup, p_l2, iters, resid, margin) = match &eval.pressure {
            Some(s) => (s.p.max_abs(), norms(&s.p, g).l2, s.iterations, s.residual, s.margin),
            None => (0.0, 0.0, 0, 0.0, f64::INFINITY),
        };
        let drift = b.s.data().iter().fold(0.0f64, |m, v| m.max((v - state.s0).abs()));
        let bound = self.config.curvature_bound.unwrap_or(self.config.curvature_factor * k);
        let violation = if let Some(f) = failure {
            Some(f.to_string())
        } else if self.k_observed > bound {
            Some("curvature_bound".to_string())
        } else if margin < self.config.margin_floor {
            Some("invertibility_margin".to_string())
        } else {
            None
        };
        DiagnosticsRecord {
            step: state.step,
            t: state.t,
            dt: state.last_dt,
            scalar_drift: drift,
            bach_trace_residual: b.bach_trace_residual(),
            bach_divergence_residual: b.bach_divergence_residual(true).max_abs(),
            weyl_energy: weyl_energy(b),
            rm_sup: rm_norm_sq.max_abs().sqrt(),
            p_sup,
            rm_l2: rm_l2_sq.sqrt(),
            p_l2,
            shi_l2,
            shi_ptwise,
            f_m_sup,
            min_metric_eigenvalue: g.min_eigenvalue(),
            pressure_iterations: iters,
            pressure_residual: resid,
            invertibility_margin: margin,
            extension: ExtensionStatus {
                k_observed: self.k_observed,
                margin,
                within_bounds: violation.is_none(),
                violation,
            },
        }
    }
}
