//! Binary checkpoint frames and their JSON sidecar.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "CBFCHKPT"                      8 bytes
//! version                         u32
//! n                               u32
//! sizes                           n x u64
//! periods                         n x f64
//! s0                              f64
//! variant tag length, tag bytes   u32, utf-8
//! t                               f64
//! step                            u64
//! last dt                         f64
//! has pressure                    u8
//! metric g_ij, i <= j             npoints x n(n+1)/2 f64, point-major, row-major grid order
//! pressure                        npoints f64 (if present)
//! checksum                        u64, FNV-1a over every preceding byte
//! ```

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cbf_core::diagnostics::Monitor;
use cbf_core::flow::{FlowState, Variant};
use cbf_core::mesh::{Grid, MetricField, Symmetry, TensorField};
use cbf_core::pressure::PressureSolution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"CBFCHKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("sidecar: {0}")]
    Sidecar(String),
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub sizes: Vec<usize>,
    pub periods: Vec<f64>,
    pub s0: f64,
    pub variant: Variant,
    pub t: f64,
    pub step: u64,
    pub last_dt: f64,
    /// Upper-triangle metric components, point-major.
    pub metric: Vec<f64>,
    pub pressure: Option<Vec<f64>>,
}

fn upper_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect()
}

impl Checkpoint {
    pub fn from_state(state: &FlowState) -> Self {
        let grid = state.metric.grid();
        let n = grid.dim();
        let pairs = upper_pairs(n);
        let g = state.metric.tensor();
        let mut metric = Vec::with_capacity(grid.npoints() * pairs.len());
        for p in 0..grid.npoints() {
            let gp = g.at(p);
            metric.extend(pairs.iter().map(|&(i, j)| gp[i * n + j]));
        }
        Self {
            sizes: grid.sizes().to_vec(),
            periods: grid.periods().to_vec(),
            s0: state.s0,
            variant: state.variant,
            t: state.t,
            step: state.step as u64,
            last_dt: state.last_dt,
            metric,
            pressure: state.pressure.as_ref().map(|p| p.data().to_vec()),
        }
    }

    pub fn grid(&self) -> Result<Arc<Grid>, CheckpointError> {
        Grid::new(self.sizes.clone(), self.periods.clone()).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }

    /// Rebuilds the flow state; the background metric comes from the run configuration.
    pub fn to_state(&self, background: Option<MetricField>) -> Result<FlowState, CheckpointError> {
        let grid = self.grid()?;
        let n = grid.dim();
        let pairs = upper_pairs(n);
        let mut data = vec![0.0; grid.npoints() * n * n];
        for p in 0..grid.npoints() {
            for (c, &(i, j)) in pairs.iter().enumerate() {
                let v = self.metric[p * pairs.len() + c];
                data[p * n * n + i * n + j] = v;
                data[p * n * n + j * n + i] = v;
            }
        }
        let metric = MetricField::new(TensorField::from_data(&grid, 2, Symmetry::Symmetric, data))
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let mut state = FlowState::new(metric, self.s0, self.variant, background)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        state.t = self.t;
        state.step = self.step as usize;
        state.last_dt = self.last_dt;
        state.pressure =
            self.pressure.clone().map(|p| TensorField::from_data(&grid, 0, Symmetry::None, p));
        Ok(state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(64 + 8 * (self.metric.len() + self.pressure.as_ref().map_or(0, |p| p.len())));
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.sizes.len() as u32).to_le_bytes());
        for &s in &self.sizes {
            b.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for &l in &self.periods {
            b.extend_from_slice(&l.to_le_bytes());
        }
        b.extend_from_slice(&self.s0.to_le_bytes());
        let tag = self.variant.tag().as_bytes();
        b.extend_from_slice(&(tag.len() as u32).to_le_bytes());
        b.extend_from_slice(tag);
        b.extend_from_slice(&self.t.to_le_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.last_dt.to_le_bytes());
        b.push(self.pressure.is_some() as u8);
        for v in self.metric.iter().chain(self.pressure.iter().flatten()) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let sum = fnv1a(&b);
        b.extend_from_slice(&sum.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let computed = fnv1a(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut r = Reader { b: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let n = r.u32()? as usize;
        if !(1..=crate::config::MAX_DIM).contains(&n) {
            return Err(CheckpointError::Malformed(format!("dimension {n}")));
        }
        let sizes = (0..n).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
        let periods = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let s0 = r.f64()?;
        let len = r.u32()? as usize;
        let tag = std::str::from_utf8(r.take(len)?).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let variant = Variant::from_tag(tag).ok_or_else(|| CheckpointError::Malformed(format!("variant {tag:?}")))?;
        let t = r.f64()?;
        let step = r.u64()?;
        let last_dt = r.f64()?;
        let has_p = r.take(1)?[0] != 0;
        let npoints = sizes.iter().try_fold(1usize, |a, &s| a.checked_mul(s)).unwrap_or(usize::MAX);
        let ncomp = n * (n + 1) / 2;
        let metric = r.f64s(npoints.saturating_mul(ncomp))?;
        let pressure = if has_p { Some(r.f64s(npoints)?) } else { None };
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { sizes, periods, s0, variant, t, step, last_dt, metric, pressure })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&self.to_bytes())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(k).filter(|&e| e <= self.b.len());
        let end = end.ok_or_else(|| CheckpointError::Malformed("truncated".into()))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, k: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(k.checked_mul(8).ok_or_else(|| CheckpointError::Malformed("size".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Pressure-solve report stored next to a checkpoint so a resumed run can rebuild the
/// evaluation at the checkpointed state without solving again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressureReport {
    pub iterations: usize,
    pub residual: f64,
    pub margin: f64,
    pub compat_defect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub pressure: Option<PressureReport>,
    pub monitor: Monitor,
}

impl Sidecar {
    pub fn new(pressure: Option<&PressureSolution>, monitor: &Monitor) -> Self {
        Self {
            pressure: pressure.map(|s| PressureReport {
                iterations: s.iterations,
                residual: s.residual,
                margin: s.margin,
                compat_defect: s.compat_defect,
            }),
            monitor: monitor.clone(),
        }
    }

    pub fn path_for(checkpoint: &Path) -> PathBuf {
        checkpoint.with_extension("json")
    }

    pub fn write(&self, checkpoint: &Path) -> Result<(), CheckpointError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CheckpointError::Sidecar(e.to_string()))?;
        std::fs::write(Self::path_for(checkpoint), text)?;
        Ok(())
    }

    pub fn read(checkpoint: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(Self::path_for(checkpoint))?;
        serde_json::from_str(&text).map_err(|e| CheckpointError::Sidecar(e.to_string()))
    }

    /// The stored solution with the pressure field taken from the checkpoint.
    pub fn pressure_solution(&self, state: &FlowState) -> Result<Option<PressureSolution>, CheckpointError> {
        match (&self.pressure, &state.pressure) {
            (Some(r), Some(p)) => Ok(Some(PressureSolution {
                p: p.clone(),
                iterations: r.iterations,
                residual: r.residual,
                margin: r.margin,
                compat_defect: r.compat_defect,
            })),
            (None, None) => Ok(None),
            _ => Err(CheckpointError::Sidecar("pressure report does not match the checkpoint".into())),
        }
    }
}
