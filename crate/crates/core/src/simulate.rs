// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded Monte Carlo estimation of ARL and WADD, regeneration-time tails
//! and operating-characteristic sweeps.
//!
//! Trial `i` of any estimate draws from its own keyed stream (see
//! [`crate::rng`]); results are collected by trial index and reduced
//! sequentially, so reports are bit-identical for any rayon pool size.
//! All thresholds of a sweep reuse the same streams, which makes stopping
//! times pathwise monotone in the threshold.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::Horizon;
use crate::detectors::{dcusum_update, Detector, DetectorConfig, DetectorError, DetectorKind};
use crate::models::{ModelError, PhaseModel};
use crate::numerics::mean_and_stderr;
use crate::rng::{domain, stream_rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulateError {
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Ground truth for one simulated stream: change time `v1` and transient
/// durations `d_1..d_(L-1)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub v1: Horizon,
    pub durations: Vec<Horizon>,
}

impl ScenarioSpec {
    pub fn new(v1: Horizon, durations: Vec<Horizon>) -> Self {
        Self { v1, durations }
    }

    /// No change at all.
    pub fn pre_change(num_phases: usize) -> Self {
        Self::new(Horizon::Infinite, vec![Horizon::Infinite; num_phases - 1])
    }

    /// Change at the first sample.
    pub fn immediate(durations: Vec<Horizon>) -> Self {
        Self::new(Horizon::Finite(1), durations)
    }

    pub fn validate(&self, model: &PhaseModel) -> Result<(), SimulateError> {
        let l = model.num_phases();
        if self.durations.len() + 1 != l {
            return Err(SimulateError::InvalidScenario(format!(
                "L = {l} needs {} durations; got {}",
                l - 1,
                self.durations.len()
            )));
        }
        if self.v1 == Horizon::Finite(0) {
            return Err(SimulateError::InvalidScenario("v1 must be >= 1".into()));
        }
        Ok(())
    }

    /// Phase start times `v_1..v_L`; `None` for phases never reached.
    pub fn phase_starts(&self) -> Vec<Option<u64>> {
        let mut starts = Vec::with_capacity(self.durations.len() + 1);
        let mut current = match self.v1 {
            Horizon::Finite(v) => Some(v),
            Horizon::Infinite => None,
        };
        starts.push(current);
        for d in &self.durations {
            current = match (current, d) {
                (Some(v), Horizon::Finite(n)) => v.checked_add(*n),
                _ => None,
            };
            starts.push(current);
        }
        starts
    }

    /// Phase index (0 = pre-change) of sample `k` (1-based).
    pub fn phase_at(&self, k: u64) -> usize {
        phase_from_starts(&self.phase_starts(), k)
    }
}

fn phase_from_starts(starts: &[Option<u64>], k: u64) -> usize {
    starts
        .iter()
        .take_while(|s| matches!(s, Some(v) if *v <= k))
        .count()
}

impl fmt::Display for ScenarioSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v1={}", self.v1)?;
        if !self.durations.is_empty() {
            let d: Vec<String> = self.durations.iter().map(|d| d.to_string()).collect();
            write!(f, ";d={}", d.join(","))?;
        }
        Ok(())
    }
}

impl FromStr for ScenarioSpec {
    type Err = String;

    /// Parses `v1=INT|inf;d=INT|inf[,...]`; the `d=` part may be omitted
    /// for single-phase models.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut v1 = None;
        let mut durations = Vec::new();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value in scenario, got {part:?}"))?;
            match key.trim() {
                "v1" => v1 = Some(value.parse::<Horizon>()?),
                "d" => {
                    durations = value
                        .split(',')
                        .map(|d| d.parse::<Horizon>())
                        .collect::<Result<_, _>>()?;
                }
                other => return Err(format!("unknown scenario key {other:?}")),
            }
        }
        let v1 = v1.ok_or("scenario needs v1=")?;
        if v1 == Horizon::Finite(0) {
            return Err("v1 must be >= 1".into());
        }
        Ok(Self { v1, durations })
    }
}

/// Lazily generated observations `X_1, X_2, ...` following the scenario's
/// phase schedule.
pub struct ObservationStream<'m, R> {
    model: &'m PhaseModel,
    starts: Vec<Option<u64>>,
    rng: R,
    k: u64,
}

impl<'m, R: Rng> ObservationStream<'m, R> {
    /// Phase of the next sample to be drawn.
    pub fn next_phase(&self) -> usize {
        phase_from_starts(&self.starts, self.k + 1)
    }
}

impl<R: Rng> Iterator for ObservationStream<'_, R> {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        self.k += 1;
        let phase = phase_from_starts(&self.starts, self.k);
        Some(self.model.density(phase).sample(&mut self.rng))
    }
}

pub fn sample_stream<'m, R: Rng>(
    model: &'m PhaseModel,
    scenario: &ScenarioSpec,
    rng: R,
) -> Result<ObservationStream<'m, R>, SimulateError> {
    scenario.validate(model)?;
    Ok(ObservationStream {
        model,
        starts: scenario.phase_starts(),
        rng,
        k: 0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TrialResult {
    /// `None` when censored.
    pub stop_time: Option<u64>,
    /// Phase of the stopping sample.
    pub crossed_in_phase: Option<usize>,
}

pub fn run_trial<R: Rng>(
    model: &PhaseModel,
    config: &DetectorConfig,
    scenario: &ScenarioSpec,
    max_steps: u64,
    rng: R,
) -> Result<TrialResult, SimulateError> {
    let mut det = Detector::new(model, config.clone())?;
    let mut stream = sample_stream(model, scenario, rng)?;
    for k in 1..=max_steps {
        let phase = stream.next_phase();
        let x = stream.next().expect("infinite stream");
        if det.step(x)?.crossed {
            return Ok(TrialResult {
                stop_time: Some(k),
                crossed_in_phase: Some(phase),
            });
        }
    }
    Ok(TrialResult {
        stop_time: None,
        crossed_in_phase: None,
    })
}

fn run_trials(
    model: &PhaseModel,
    config: &DetectorConfig,
    scenario: &ScenarioSpec,
    n_trials: usize,
    max_steps: u64,
    master_seed: u64,
    stream_domain: u64,
) -> Result<Vec<TrialResult>, SimulateError> {
    config.validate(model)?;
    scenario.validate(model)?;
    if max_steps == 0 {
        return Err(SimulateError::InvalidArgument(
            "max_steps must be >= 1".into(),
        ));
    }
    (0..n_trials)
        .into_par_iter()
        .map(|i| {
            let rng = stream_rng(master_seed, stream_domain, i as u64);
            run_trial(model, config, scenario, max_steps, rng)
        })
        .collect()
}

/// Mean stopping time with censored trials counted at `max_steps`.
fn summarize(trials: &[TrialResult], max_steps: u64) -> (f64, f64, usize) {
    let times: Vec<f64> = trials
        .iter()
        .map(|t| t.stop_time.unwrap_or(max_steps) as f64)
        .collect();
    let (mean, se) = mean_and_stderr(&times);
    let censored = trials.iter().filter(|t| t.stop_time.is_none()).count();
    (mean, se, censored)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArlEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_trials: usize,
    /// Trials that hit `max_steps`; when nonzero `mean` is a lower estimate.
    pub n_censored: usize,
    pub max_steps: u64,
}

impl ArlEstimate {
    pub fn is_lower_estimate(&self) -> bool {
        self.n_censored > 0
    }
}

pub const MIN_ARL_TRIALS: usize = 100;

/// Mean false-alarm time over independent `f0` streams.
pub fn estimate_arl(
    model: &PhaseModel,
    config: &DetectorConfig,
    n_trials: usize,
    max_steps: u64,
    master_seed: u64,
) -> Result<ArlEstimate, SimulateError> {
    if n_trials < MIN_ARL_TRIALS {
        return Err(SimulateError::InvalidArgument(format!(
            "ARL estimation needs at least {MIN_ARL_TRIALS} trials; got {n_trials}"
        )));
    }
    let scenario = ScenarioSpec::pre_change(model.num_phases());
    let trials = run_trials(
        model,
        config,
        &scenario,
        n_trials,
        max_steps,
        master_seed,
        domain::ARL,
    )?;
    let (mean, stderr, n_censored) = summarize(&trials, max_steps);
    Ok(ArlEstimate {
        mean,
        stderr,
        n_trials,
        n_censored,
        max_steps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WaddEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_trials: usize,
    pub n_censored: usize,
    /// Stopped trials by the phase (0..=L) of the stopping sample.
    pub phase_histogram: Vec<u64>,
}

fn estimate_wadd_in_domain(
    model: &PhaseModel,
    config: &DetectorConfig,
    scenario: &ScenarioSpec,
    n_trials: usize,
    max_steps: u64,
    master_seed: u64,
    stream_domain: u64,
) -> Result<WaddEstimate, SimulateError> {
    if scenario.v1 != Horizon::Finite(1) {
        return Err(SimulateError::InvalidScenario(format!(
            "WADD is evaluated at v1 = 1; got v1 = {}",
            scenario.v1
        )));
    }
    if n_trials == 0 {
        return Err(SimulateError::InvalidArgument(
            "n_trials must be >= 1".into(),
        ));
    }
    let trials = run_trials(
        model,
        config,
        scenario,
        n_trials,
        max_steps,
        master_seed,
        stream_domain,
    )?;
    let (mean, stderr, n_censored) = summarize(&trials, max_steps);
    let mut phase_histogram = vec![0u64; model.num_phases() + 1];
    for p in trials.iter().filter_map(|t| t.crossed_in_phase) {
        phase_histogram[p] += 1;
    }
    Ok(WaddEstimate {
        mean,
        stderr,
        n_trials,
        n_censored,
        phase_histogram,
    })
}

/// Mean detection delay with the change at the first sample, which is where
/// both Lorden's and Pollak's worst case sit for these detectors. The
/// reported mean is `E[tau]`, counting the change sample itself.
pub fn estimate_wadd(
    model: &PhaseModel,
    config: &DetectorConfig,
    scenario: &ScenarioSpec,
    n_trials: usize,
    max_steps: u64,
    master_seed: u64,
) -> Result<WaddEstimate, SimulateError> {
    estimate_wadd_in_domain(
        model,
        config,
        scenario,
        n_trials,
        max_steps,
        master_seed,
        domain::WADD_BASE,
    )
}

/// `max_steps` for ARL runs when none is given: 50 times `e^b`, kept
/// within `[10^4, 10^8]`.
pub fn default_arl_max_steps(threshold: f64) -> u64 {
    (50.0 * threshold.exp()).clamp(1e4, 1e8).ceil() as u64
}

pub const DEFAULT_WADD_MAX_STEPS: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcSweepSpec {
    /// Ascending thresholds.
    pub thresholds: Vec<f64>,
    pub scenarios: Vec<ScenarioSpec>,
    pub arl_trials: usize,
    pub wadd_trials: usize,
    /// `None` selects [`default_arl_max_steps`] per threshold.
    pub arl_max_steps: Option<u64>,
    pub wadd_max_steps: u64,
    pub master_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OcCell {
    pub scenario_id: usize,
    pub scenario: String,
    pub wadd: WaddEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OcRow {
    pub b: f64,
    pub arl: ArlEstimate,
    pub cells: Vec<OcCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OcReport {
    pub kind: DetectorKind,
    pub master_seed: u64,
    pub rows: Vec<OcRow>,
}

pub const OC_CSV_HEADER: &str = "b,arl,arl_se,scenario_id,wadd,wadd_se,n_trials,n_censored";

impl OcReport {
    /// One line per (threshold, scenario). `n_trials` is the WADD trial
    /// count and `n_censored` adds the censored trials of the row's ARL and
    /// WADD estimates. Rows without scenarios leave the WADD columns empty
    /// and report the ARL trial count.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(OC_CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            if row.cells.is_empty() {
                out.push_str(&format!(
                    "{},{},{},,,,{},{}\n",
                    row.b, row.arl.mean, row.arl.stderr, row.arl.n_trials, row.arl.n_censored
                ));
            }
            for cell in &row.cells {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    row.b,
                    row.arl.mean,
                    row.arl.stderr,
                    cell.scenario_id,
                    cell.wadd.mean,
                    cell.wadd.stderr,
                    cell.wadd.n_trials,
                    row.arl.n_censored + cell.wadd.n_censored
                ));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// ARL and per-scenario WADD for each threshold, in threshold order.
pub fn oc_sweep(
    model: &PhaseModel,
    kind: &DetectorKind,
    spec: &OcSweepSpec,
) -> Result<OcReport, SimulateError> {
    if spec.thresholds.is_empty() {
        return Err(SimulateError::InvalidArgument("no thresholds given".into()));
    }
    if spec.thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SimulateError::InvalidArgument(
            "thresholds must be strictly ascending".into(),
        ));
    }
    for s in &spec.scenarios {
        s.validate(model)?;
    }
    let mut rows = Vec::with_capacity(spec.thresholds.len());
    for &b in &spec.thresholds {
        let config = DetectorConfig::new(kind.clone(), b);
        let arl_steps = spec
            .arl_max_steps
            .unwrap_or_else(|| default_arl_max_steps(b));
        let arl = estimate_arl(model, &config, spec.arl_trials, arl_steps, spec.master_seed)?;
        let cells = spec
            .scenarios
            .iter()
            .enumerate()
            .map(|(j, scenario)| {
                let wadd = estimate_wadd_in_domain(
                    model,
                    &config,
                    scenario,
                    spec.wadd_trials,
                    spec.wadd_max_steps,
                    spec.master_seed,
                    domain::WADD_BASE + j as u64,
                )?;
                Ok(OcCell {
                    scenario_id: j,
                    scenario: scenario.to_string(),
                    wadd,
                })
            })
            .collect::<Result<Vec<_>, SimulateError>>()?;
        rows.push(OcRow { b, arl, cells });
    }
    Ok(OcReport {
        kind: kind.clone(),
        master_seed: spec.master_seed,
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TailPoint {
    pub m: u64,
    pub survival: f64,
    pub stderr: f64,
    pub survivors: usize,
}

/// First regeneration times of the D-CuSum statistic under `f0`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegenerationSurvey {
    pub n_steps: u64,
    /// Per trial; `None` if no regeneration within `n_steps`.
    pub first_regeneration: Vec<Option<u64>>,
}

impl RegenerationSurvey {
    pub fn n_trials(&self) -> usize {
        self.first_regeneration.len()
    }

    pub fn regenerated(&self) -> usize {
        self.first_regeneration
            .iter()
            .filter(|y| y.is_some())
            .count()
    }

    /// Empirical `P(Y > m)` with its binomial standard error.
    pub fn survival(&self, m: u64) -> TailPoint {
        let n = self.n_trials();
        let survivors = self
            .first_regeneration
            .iter()
            .filter(|y| y.is_none_or(|y| y > m))
            .count();
        let p = survivors as f64 / n as f64;
        TailPoint {
            m,
            survival: p,
            stderr: (p * (1.0 - p) / n as f64).sqrt(),
            survivors,
        }
    }

    /// Tail points for `m = 1, 2, ...` while at least `min_survivors` trials
    /// remain.
    pub fn tail(&self, min_survivors: usize) -> Vec<TailPoint> {
        (1..=self.n_steps)
            .map(|m| self.survival(m))
            .take_while(|p| p.survivors >= min_survivors.max(1))
            .collect()
    }

    /// Weighted least-squares slope of `log P(Y > m)` against `m`, with its
    /// standard error, over the tail points having at least `min_survivors`
    /// trials and survival below one. Delta-method weights
    /// `n S / (1 - S)`.
    pub fn log_survival_slope(&self, min_survivors: usize) -> Option<(f64, f64)> {
        let n = self.n_trials() as f64;
        let pts: Vec<(f64, f64, f64)> = self
            .tail(min_survivors)
            .into_iter()
            .filter(|p| p.survival < 1.0)
            .map(|p| {
                (
                    p.m as f64,
                    p.survival.ln(),
                    n * p.survival / (1.0 - p.survival),
                )
            })
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let sw: f64 = pts.iter().map(|p| p.2).sum();
        let mx = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
        let my = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
        let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - mx) * (p.0 - mx)).sum();
        let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum();
        if sxx <= 0.0 {
            return None;
        }
        Some((sxy / sxx, (1.0 / sxx).sqrt()))
    }
}

pub fn regeneration_survey(
    model: &PhaseModel,
    n_steps: u64,
    n_trials: usize,
    master_seed: u64,
) -> Result<RegenerationSurvey, SimulateError> {
    if n_steps < 1000 {
        return Err(SimulateError::InvalidArgument(format!(
            "regeneration survey needs n_steps >= 1000; got {n_steps}"
        )));
    }
    if n_trials == 0 {
        return Err(SimulateError::InvalidArgument(
            "n_trials must be >= 1".into(),
        ));
    }
    let l = model.num_phases();
    let f0 = model.density(0);
    let first_regeneration = (0..n_trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(master_seed, domain::REGENERATION, i as u64);
            let mut omega = vec![0.0; l];
            let mut z = vec![0.0; l];
            for k in 1..=n_steps {
                model.llr_into(f0.sample(&mut rng), &mut z)?;
                dcusum_update(&mut omega, &z);
                if omega.iter().all(|&w| w <= 0.0) {
                    return Ok(Some(k));
                }
            }
            Ok(None)
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(RegenerationSurvey {
        n_steps,
        first_regeneration,
    })
}

/// Statistic paths of several detectors fed the same stream; one row per
/// sample, one column per config.
pub fn evolution_path(
    model: &PhaseModel,
    configs: &[DetectorConfig],
    scenario: &ScenarioSpec,
    n_steps: u64,
    seed: u64,
) -> Result<Vec<Vec<f64>>, SimulateError> {
    let mut detectors = configs
        .iter()
        .map(|c| Detector::new(model, c.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let stream = sample_stream(model, scenario, stream_rng(seed, domain::PATH, 0))?;
    stream
        .take(n_steps as usize)
        .map(|x| {
            detectors
                .iter_mut()
                .map(|d| Ok(d.step(x)?.statistic))
                .collect::<Result<Vec<_>, SimulateError>>()
        })
        .collect()
}
