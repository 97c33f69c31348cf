// SPDX-License-Identifier: MIT OR Apache-2.0

//! Short-window property checks tying the recursive detectors to the
//! brute-force oracles. Each check runs over seeded random streams whose
//! change time and transient durations are themselves drawn at random, and
//! reports the first failing stream so it can be replayed.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::design::Horizon;
use crate::detectors::{cusum_update, Detector, DetectorConfig, DetectorError};
use crate::models::{ModelError, PhaseModel};
use crate::numerics::mean_and_stderr;
use crate::oracle::{
    glr_bruteforce, mixture_glr, mixture_sr_statistic, weighted_glr_bruteforce, DurationPrior,
    OracleError,
};
use crate::rng::{domain, stream_rng};
use crate::simulate::{sample_stream, ScenarioSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidationError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Absolute slack for comparisons between differently ordered sums.
pub const TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyCheck {
    pub name: String,
    pub passed: bool,
    pub streams: usize,
    /// Largest violation (or deviation, for equality checks) seen.
    pub worst: f64,
    /// Index of the first failing stream under `seed`.
    pub failing_stream: Option<u64>,
    pub seed: u64,
    pub detail: String,
}

impl PropertyCheck {
    pub fn line(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        let mut s = format!("{status} {}: {}", self.name, self.detail);
        if let Some(i) = self.failing_stream {
            s.push_str(&format!(" (replay: seed {} stream {i})", self.seed));
        }
        s
    }
}

/// Stream `index` of a validation campaign: `v1` uniform on `1..=k`,
/// each duration uniform on `0..=k/2`, then `k` samples.
pub fn validation_stream(model: &PhaseModel, seed: u64, index: u64, k: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, domain::VALIDATION, index);
    let v1 = rng.random_range(1..=k as u64);
    let durations = (1..model.num_phases())
        .map(|_| Horizon::Finite(rng.random_range(0..=(k / 2) as u64)))
        .collect();
    let scenario = ScenarioSpec::new(Horizon::Finite(v1), durations);
    sample_stream(model, &scenario, rng)
        .expect("scenario matches model")
        .take(k)
        .collect()
}

/// Per-stream worst deviation; reduced in stream order.
fn reduce(
    name: &str,
    seed: u64,
    per_stream: Vec<Result<f64, ValidationError>>,
    limit: f64,
    what: &str,
) -> Result<PropertyCheck, ValidationError> {
    let mut worst = f64::NEG_INFINITY;
    let mut failing = None;
    for (i, r) in per_stream.iter().enumerate() {
        let v = *r.as_ref().map_err(Clone::clone)?;
        if v > limit && failing.is_none() {
            failing = Some(i as u64);
        }
        if v > worst || v.is_nan() {
            worst = v;
        }
    }
    if per_stream.is_empty() {
        worst = 0.0;
    }
    Ok(PropertyCheck {
        name: name.to_string(),
        passed: failing.is_none(),
        streams: per_stream.len(),
        worst,
        failing_stream: failing,
        seed,
        detail: format!("{} streams, worst {what} {worst:.3e}", per_stream.len()),
    })
}

/// Recursive D-CuSum and WD-CuSum statistics against enumeration at every
/// step of `n_streams` streams of length `k`.
pub fn check_oracle_equality(
    model: &PhaseModel,
    rho: &[f64],
    n_streams: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<PropertyCheck>, ValidationError> {
    let run = |wd: bool| -> Vec<Result<f64, ValidationError>> {
        (0..n_streams as u64)
            .into_par_iter()
            .map(|i| {
                let xs = validation_stream(model, seed, i, k);
                let config = if wd {
                    DetectorConfig::wdcusum(rho.to_vec(), f64::MAX)
                } else {
                    DetectorConfig::dcusum(f64::MAX)
                };
                let mut det = Detector::new(model, config)?;
                let mut worst = 0.0f64;
                for n in 1..=k {
                    let stat = det.step(xs[n - 1])?;
                    let oracle = if wd {
                        weighted_glr_bruteforce(model, rho, &xs[..n])?
                    } else {
                        glr_bruteforce(model, &xs[..n])?
                    };
                    let dev = (stat.statistic - oracle.value).abs();
                    worst = if dev.is_nan() {
                        f64::NAN
                    } else {
                        worst.max(dev)
                    };
                }
                Ok(worst)
            })
            .collect()
    };
    let l = model.num_phases();
    Ok(vec![
        reduce(
            &format!("oracle equality dcusum (L={l}, k={k})"),
            seed,
            run(false),
            TOLERANCE,
            "|recursion - enumeration|",
        )?,
        reduce(
            &format!("oracle equality wdcusum (L={l}, k={k}, rho={rho:?})"),
            seed,
            run(true),
            TOLERANCE,
            "|recursion - enumeration|",
        )?,
    ])
}

/// Pathwise `W~ <= W^`, the weight gap bound, and for `L = 2` the sandwich
/// `W~ <= W' <= log R` with the geometric prior matching `rho_1`. The
/// sandwich compares statistics before the positive part.
pub fn check_ordering(
    model: &PhaseModel,
    rho: &[f64],
    n_streams: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<PropertyCheck>, ValidationError> {
    let l = model.num_phases();
    let max_keep = rho.iter().map(|r| (1.0 - r).ln().abs()).fold(0.0, f64::max);
    let switch_sum: f64 = rho.iter().map(|r| r.ln().abs()).sum();
    let per_stream: Vec<Result<[f64; 4], ValidationError>> = (0..n_streams as u64)
        .into_par_iter()
        .map(|i| {
            let xs = validation_stream(model, seed, i, k);
            let mut d = Detector::new(model, DetectorConfig::dcusum(f64::MAX))?;
            let mut w = Detector::new(model, DetectorConfig::wdcusum(rho.to_vec(), f64::MAX))?;
            let mut worst = [f64::NEG_INFINITY; 4];
            for n in 1..=k {
                let x = xs[n - 1];
                let hat = d.step(x)?;
                let tilde = w.step(x)?;
                worst[0] = worst[0].max(tilde.statistic - hat.statistic);
                let bound = n as f64 * max_keep + switch_sum;
                worst[1] = worst[1].max(hat.statistic - tilde.statistic - bound);
                if l == 2 {
                    let prior = DurationPrior::Geometric { rho: rho[0] };
                    let mix = mixture_glr(model, &prior, &xs[..n])?;
                    let sr = mixture_sr_statistic(model, &prior, &xs[..n])?;
                    worst[2] = worst[2].max(w.state().raw_statistic() - mix);
                    worst[3] = worst[3].max(mix - sr);
                }
            }
            Ok(worst)
        })
        .collect();
    let column = |j: usize| -> Vec<Result<f64, ValidationError>> {
        per_stream
            .iter()
            .map(|r| r.as_ref().map(|w| w[j]).map_err(Clone::clone))
            .collect()
    };
    let mut out = vec![
        reduce(
            &format!("ordering wdcusum <= dcusum (L={l})"),
            seed,
            column(0),
            TOLERANCE,
            "excess",
        )?,
        reduce(
            &format!("weight gap bound (L={l})"),
            seed,
            column(1),
            TOLERANCE,
            "excess",
        )?,
    ];
    if l == 2 {
        out.push(reduce(
            "sandwich wdcusum <= mixture glr",
            seed,
            column(2),
            TOLERANCE,
            "excess",
        )?);
        out.push(reduce(
            "sandwich mixture glr <= log R",
            seed,
            column(3),
            TOLERANCE,
            "excess",
        )?);
    }
    Ok(out)
}

/// Single-phase D-CuSum against the classical CuSum update, bit for bit.
pub fn check_cusum_reduction(
    model: &PhaseModel,
    n_steps: usize,
    seed: u64,
) -> Result<PropertyCheck, ValidationError> {
    if model.num_phases() != 1 {
        return Err(OracleError::UnsupportedL(model.num_phases()).into());
    }
    let mut rng = stream_rng(seed, domain::VALIDATION, u64::MAX);
    let mut det = Detector::new(model, DetectorConfig::dcusum(f64::MAX))?;
    let mut s = 0.0f64;
    let mut first_mismatch = None;
    for n in 1..=n_steps as u64 {
        // Alternate pre- and post-change blocks of 500 samples.
        let density = model.density(((n / 500) % 2) as usize);
        let x = density.sample(&mut rng);
        let z = model.log_likelihood_ratio(1, x)?;
        s = cusum_update(s, z);
        let stat = det.step(x)?;
        if stat.statistic.to_bits() != s.to_bits() && first_mismatch.is_none() {
            first_mismatch = Some(n);
        }
    }
    Ok(PropertyCheck {
        name: "classical cusum reduction (L=1)".into(),
        passed: first_mismatch.is_none(),
        streams: 1,
        worst: 0.0,
        failing_stream: None,
        seed,
        detail: match first_mismatch {
            None => format!("{n_steps} steps bit-identical"),
            Some(n) => format!("first mismatch at step {n}"),
        },
    })
}

/// Monte Carlo mean of the mixture Shiryaev-Roberts statistic `R[k]` under
/// `f0` against its expectation `k`, at `z_limit` standard errors.
pub fn check_martingale(
    model: &PhaseModel,
    rho: f64,
    k: usize,
    n_streams: usize,
    seed: u64,
    z_limit: f64,
) -> Result<PropertyCheck, ValidationError> {
    let prior = DurationPrior::Geometric { rho };
    let f0 = model.density(0);
    let values = (0..n_streams as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, domain::VALIDATION, (1 << 40) + i);
            let xs: Vec<f64> = (0..k).map(|_| f0.sample(&mut rng)).collect();
            Ok(mixture_sr_statistic(model, &prior, &xs)?.exp())
        })
        .collect::<Result<Vec<f64>, ValidationError>>()?;
    let (mean, se) = mean_and_stderr(&values);
    let z = (mean - k as f64) / se;
    Ok(PropertyCheck {
        name: format!("martingale E[R[{k}]] = {k}"),
        passed: z.abs() <= z_limit,
        streams: n_streams,
        worst: z.abs(),
        failing_stream: None,
        seed,
        detail: format!("mean {mean:.4} se {se:.4} z {z:.2}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::presets::*;

    #[test]
    fn validation_streams_are_reproducible() {
        let m = weak_symmetric();
        assert_eq!(
            validation_stream(&m, 1, 7, 20),
            validation_stream(&m, 1, 7, 20)
        );
        assert_ne!(
            validation_stream(&m, 1, 7, 20),
            validation_stream(&m, 1, 8, 20)
        );
    }

    #[test]
    fn short_suite_passes_on_presets() {
        for m in [weak_symmetric(), never_regenerating()] {
            for c in check_oracle_equality(&m, &[0.05], 20, 12, 3).unwrap() {
                assert!(c.passed, "{}", c.line());
            }
            for c in check_ordering(&m, &[0.05], 20, 12, 3).unwrap() {
                assert!(c.passed, "{}", c.line());
            }
        }
        let c = check_cusum_reduction(&gaussian_means(&[1.0]), 5000, 1).unwrap();
        assert!(c.passed, "{}", c.line());
    }

    #[test]
    fn failing_stream_is_named() {
        let c = reduce("x", 9, vec![Ok(0.0), Ok(1.0), Ok(2.0)], 0.5, "dev").unwrap();
        assert!(!c.passed);
        assert_eq!(c.failing_stream, Some(1));
        assert!(c.line().contains("seed 9 stream 1"));
    }
}
