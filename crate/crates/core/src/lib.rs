//! Numerical core for conformal Bach flow on periodic grids: tensor storage and
//! stencils, the curvature pipeline up to the Bach tensor, the pressure equation,
//! time stepping, run diagnostics and a grid-free oracle for verification.

pub mod mesh;
pub mod oracle;
pub mod curvature;
pub mod checks;
pub mod krylov;
pub mod pressure;
pub mod flow;
pub mod diagnostics;
