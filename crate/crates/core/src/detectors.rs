// SPDX-License-Identifier: MIT OR Apache-2.0

//! Constant-memory recursive detectors: D-CuSum, WD-CuSum and Page's CuSum.
//!
//! Each detector keeps one running statistic per post-change phase. The
//! statistic `Omega(i)[k]` is the best log-likelihood ratio over all change
//! tuples whose phase at time `k` is `i`. All updates read the previous state
//! in full before writing: the in-place loops below carry a running prefix
//! maximum that is folded from old values before each slot is overwritten.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{ModelError, PhaseModel, LLR_FLOOR};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("threshold must be finite and > 0; got {0}")]
    InvalidThreshold(f64),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("classical CuSum needs a single post-change phase; model has L = {0}")]
    KindRequiresSinglePhase(usize),
    #[error("max_steps must be at least 1")]
    InvalidMaxSteps,
    #[error("observation source ended after {consumed} samples without a crossing")]
    StreamEnded { consumed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DetectorKind {
    #[serde(rename = "dcusum")]
    DCusum,
    /// `rho` holds `rho_1..rho_(L-1)`, each strictly inside `(0, 1)`.
    #[serde(rename = "wdcusum")]
    WdCusum { rho: Vec<f64> },
    #[serde(rename = "cusum")]
    Cusum,
}

impl DetectorKind {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::DCusum => "dcusum",
            DetectorKind::WdCusum { .. } => "wdcusum",
            DetectorKind::Cusum => "cusum",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    #[serde(flatten)]
    pub kind: DetectorKind,
    pub threshold: f64,
}

impl DetectorConfig {
    pub fn new(kind: DetectorKind, threshold: f64) -> Self {
        Self { kind, threshold }
    }

    pub fn dcusum(threshold: f64) -> Self {
        Self::new(DetectorKind::DCusum, threshold)
    }

    pub fn wdcusum(rho: Vec<f64>, threshold: f64) -> Self {
        Self::new(DetectorKind::WdCusum { rho }, threshold)
    }

    pub fn cusum(threshold: f64) -> Self {
        Self::new(DetectorKind::Cusum, threshold)
    }

    pub fn validate(&self, model: &PhaseModel) -> Result<(), DetectorError> {
        if !self.threshold.is_finite() || self.threshold <= 0.0 {
            return Err(DetectorError::InvalidThreshold(self.threshold));
        }
        let l = model.num_phases();
        match &self.kind {
            DetectorKind::DCusum => {}
            DetectorKind::WdCusum { rho } => {
                LogWeights::from_rho(rho, l)?;
            }
            DetectorKind::Cusum => {
                if l != 1 {
                    return Err(DetectorError::KindRequiresSinglePhase(l));
                }
            }
        }
        Ok(())
    }

    /// Crossing rule: `statistic > b` for D-CuSum and CuSum, `>= b` for
    /// WD-CuSum.
    pub fn crosses(&self, statistic: f64) -> bool {
        match self.kind {
            DetectorKind::WdCusum { .. } => statistic >= self.threshold,
            _ => statistic > self.threshold,
        }
    }
}

/// Log-domain weights of the WD-CuSum recursion.
///
/// `switch[j] = log rho_j` for `j = 0..L-1` (with `rho_0 = 1`) and
/// `keep[i-1] = log(1 - rho_i)` for `i = 1..L` (with `rho_L = 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct LogWeights {
    pub switch: Vec<f64>,
    pub keep: Vec<f64>,
}

impl LogWeights {
    pub fn from_rho(rho: &[f64], num_phases: usize) -> Result<Self, DetectorError> {
        if rho.len() + 1 != num_phases {
            return Err(DetectorError::InvalidWeights(format!(
                "L = {num_phases} needs {} weights; got {}",
                num_phases - 1,
                rho.len()
            )));
        }
        if let Some(r) = rho.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return Err(DetectorError::InvalidWeights(format!(
                "every rho must lie strictly inside (0, 1); got {r}"
            )));
        }
        let switch = std::iter::once(0.0)
            .chain(rho.iter().map(|r| r.ln()))
            .collect();
        let keep = rho
            .iter()
            .map(|r| (-r).ln_1p())
            .chain(std::iter::once(0.0))
            .collect();
        Ok(Self { switch, keep })
    }

    /// All-zero weights; the WD-CuSum update then coincides with D-CuSum.
    pub fn neutral(num_phases: usize) -> Self {
        Self {
            switch: vec![0.0; num_phases],
            keep: vec![0.0; num_phases],
        }
    }

    pub fn num_phases(&self) -> usize {
        self.keep.len()
    }
}

/// One D-CuSum step on `omega` given `z[i] = Z_(i+1)(x)`.
#[inline]
pub fn dcusum_update(omega: &mut [f64], z: &[f64]) {
    let mut best_prev = 0.0f64;
    for (w, &zi) in omega.iter_mut().zip(z) {
        best_prev = best_prev.max(*w);
        *w = best_prev + zi;
    }
}

/// One WD-CuSum step, general `L`.
#[inline]
pub fn wdcusum_update(omega: &mut [f64], z: &[f64], weights: &LogWeights) {
    // `best` tracks max_j (Omega(j)[k-1] + sum_{l=j}^{i-1} log rho_l), Omega(0) = 0.
    let mut best = 0.0f64;
    for (i, (w, &zi)) in omega.iter_mut().zip(z).enumerate() {
        best = (best + weights.switch[i]).max(*w);
        *w = (best + zi) + weights.keep[i];
    }
}

/// The two-phase WD-CuSum update written out term by term.
pub fn wdcusum_update_two_phase(omega: &mut [f64; 2], z: [f64; 2], rho1: f64) {
    let log_rho = rho1.ln();
    let log_keep = (-rho1).ln_1p();
    let (o1, o2) = (omega[0], omega[1]);
    omega[0] = (o1.max(0.0) + z[0]) + log_keep;
    omega[1] = log_rho.max(o1 + log_rho).max(o2) + z[1];
}

/// Page's CuSum on a positive-part statistic: `S = max(0, S + Z)`.
#[inline]
pub fn cusum_update(s: f64, z: f64) -> f64 {
    (s + z).max(0.0)
}

fn positive_part_of_max(omega: &[f64]) -> f64 {
    omega.iter().copied().fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    pub omega: Vec<f64>,
    /// Samples consumed.
    pub k: u64,
    /// Latched first crossing time.
    pub stopped_at: Option<u64>,
}

impl DetectorState {
    /// Zeros for D-CuSum and CuSum, the floor sentinel for WD-CuSum.
    pub fn fresh(kind: &DetectorKind, num_phases: usize) -> Self {
        let init = match kind {
            DetectorKind::WdCusum { .. } => LLR_FLOOR,
            _ => 0.0,
        };
        Self {
            omega: vec![init; num_phases],
            k: 0,
            stopped_at: None,
        }
    }

    pub fn statistic(&self) -> f64 {
        positive_part_of_max(&self.omega)
    }

    /// Largest component, without the positive part.
    pub fn raw_statistic(&self) -> f64 {
        self.omega.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub statistic: f64,
    pub regenerated: bool,
    pub crossed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunOutcome {
    Stopped { stop_time: u64 },
    Censored { max_steps: u64 },
}

impl RunOutcome {
    pub fn stop_time(&self) -> Option<u64> {
        match self {
            RunOutcome::Stopped { stop_time } => Some(*stop_time),
            RunOutcome::Censored { .. } => None,
        }
    }
}

/// A detector bound to a model; owns its state.
#[derive(Clone, Debug)]
pub struct Detector<'m> {
    model: &'m PhaseModel,
    config: DetectorConfig,
    weights: Option<LogWeights>,
    state: DetectorState,
    z: Vec<f64>,
}

impl<'m> Detector<'m> {
    pub fn new(model: &'m PhaseModel, config: DetectorConfig) -> Result<Self, DetectorError> {
        config.validate(model)?;
        let l = model.num_phases();
        let weights = match &config.kind {
            DetectorKind::WdCusum { rho } => Some(LogWeights::from_rho(rho, l)?),
            _ => None,
        };
        Ok(Self {
            model,
            state: DetectorState::fresh(&config.kind, l),
            config,
            weights,
            z: vec![0.0; l],
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn state(&self) -> &DetectorState {
        &self.state
    }

    pub fn statistic(&self) -> f64 {
        self.state.statistic()
    }

    pub fn reset(&mut self) {
        self.state = DetectorState::fresh(&self.config.kind, self.model.num_phases());
    }

    /// Consumes one observation. Steps past a crossing keep updating the
    /// statistic; `stopped_at` stays at the first crossing.
    pub fn step(&mut self, x: f64) -> Result<StepOutcome, DetectorError> {
        let mut z = std::mem::take(&mut self.z);
        let res = self.model.llr_into(x, &mut z);
        let out = res.map(|()| self.step_llr(&z));
        self.z = z;
        Ok(out?)
    }

    /// Same as [`Detector::step`] with precomputed log-likelihood ratios.
    pub fn step_llr(&mut self, z: &[f64]) -> StepOutcome {
        let omega = &mut self.state.omega;
        match &self.config.kind {
            DetectorKind::DCusum => dcusum_update(omega, z),
            DetectorKind::WdCusum { .. } => {
                wdcusum_update(omega, z, self.weights.as_ref().expect("weights set"))
            }
            DetectorKind::Cusum => omega[0] = cusum_update(omega[0], z[0]),
        }
        self.state.k += 1;
        let statistic = positive_part_of_max(omega);
        let crossed = self.config.crosses(statistic);
        if crossed && self.state.stopped_at.is_none() {
            self.state.stopped_at = Some(self.state.k);
        }
        StepOutcome {
            statistic,
            regenerated: statistic == 0.0,
            crossed,
        }
    }
}

/// Feeds observations until the first crossing.
///
/// Returns [`RunOutcome::Censored`] after `max_steps` samples without a
/// crossing, and [`DetectorError::StreamEnded`] if the source runs dry first.
pub fn run_until_stop<I>(
    model: &PhaseModel,
    config: &DetectorConfig,
    stream: I,
    max_steps: u64,
) -> Result<RunOutcome, DetectorError>
where
    I: IntoIterator<Item = f64>,
{
    if max_steps == 0 {
        return Err(DetectorError::InvalidMaxSteps);
    }
    let mut det = Detector::new(model, config.clone())?;
    let mut stream = stream.into_iter();
    for k in 1..=max_steps {
        let Some(x) = stream.next() else {
            return Err(DetectorError::StreamEnded { consumed: k - 1 });
        };
        if det.step(x)?.crossed {
            return Ok(RunOutcome::Stopped { stop_time: k });
        }
    }
    Ok(RunOutcome::Censored { max_steps })
}
