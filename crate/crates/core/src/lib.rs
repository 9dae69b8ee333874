//! Survival prognosis from volumetric tumor/vessel imaging, end to end:
//!
//! - [`tensor`]: a tape-based reverse-mode differentiable array engine with
//!   the primitives the model needs (matmul, 3D convolution, attention,
//!   normalization), gradient-checkable against finite differences.
//! - [`geometry`]: voxel-mask surface extraction, uniform surface sampling,
//!   and the squared surface-to-surface distance family (point-to-surface,
//!   set distance, K-closest subsets, Chamfer baseline).
//! - [`model`]: the prognostic network — per-phase texture encoders,
//!   masked cross-phase attention fusion, a structure CNN over tumor-vessel
//!   mask pairs, a learnable cross-attention distance over closest surface
//!   points, and a fused risk head.
//! - [`survival`]: Cox partial-likelihood loss, Harrell's C-index,
//!   IPCW cumulative/dynamic AUC, Kaplan-Meier curves, log-rank tests, and
//!   Cox regression fits with hazard ratios.
//! - [`synth`]: deterministic synthetic phantom cohorts (ellipsoid tumors,
//!   tubular vessels, outcome generation with geometry-dependent hazards)
//!   and the `PVL1` volume file format.

pub mod geometry;
pub mod model;
pub mod survival;
pub mod synth;
pub mod tensor;
