// SPDX-License-Identifier: MIT OR Apache-2.0

//! Quickest change detection when the post-change law passes through a
//! finite sequence of transient phases before settling.
//!
//! [`models`] holds the phase densities, [`detectors`] the recursive
//! D-CuSum and WD-CuSum statistics, [`oracle`] brute-force references,
//! [`design`] threshold and weight selection, and [`simulate`] the seeded
//! Monte Carlo harness. [`validation`] ties the detectors to the oracles on
//! short random windows.

#![forbid(unsafe_code)]

pub mod design;
pub mod detectors;
pub mod models;
pub mod numerics;
pub mod oracle;
pub mod rng;
pub mod simulate;
pub mod validation;

pub use design::{Horizon, RegimeVector};
pub use detectors::{Detector, DetectorConfig, DetectorKind, RunOutcome, StepOutcome};
pub use models::{AlphaOutcome, Density, PhaseModel};
pub use simulate::{OcReport, OcSweepSpec, ScenarioSpec};
