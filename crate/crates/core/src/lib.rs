//! Three-dimensional radio environment maps from sparse, optimally placed
//! samples.
//!
//! The crate covers the whole chain: a synthetic channel model produces a
//! voxel RSS field, [`sampling`] picks where to measure, [`sbl`] recovers the
//! sparse transmitter vector and [`gpr`] fills in log-normal shadowing at the
//! voxels that were not measured. [`pipeline`] wires the stages together and
//! runs parameter sweeps.
//!
//! All power bookkeeping is linear (mW); dB only appears at the I/O boundary
//! and inside the shadowing layer.

// Range checks are written `!(x > 0.0)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod config;
pub mod error;
pub mod gpr;
pub mod grid;
pub mod linalg;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod sbl;

pub use channel::{ChannelParams, Observations, ShadowModel, SourceField};
pub use config::ExperimentConfig;
pub use error::{RemError, Result};
pub use gpr::{GpState, ShadowPrediction};
pub use grid::{GridSpec, RemTensor};
pub use par::Execution;
pub use pipeline::{RunResult, SweepRow, SweepVariable};
pub use sampling::{Dictionary, MeasurementPlan};
pub use sbl::{SblConfig, SblState};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Linear power (mW) to dBm.
pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}
