// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reference statistics by direct enumeration of change tuples.
//!
//! These functions are exponential in `L` and exist only to pin down the
//! recursive detectors on short windows. They never share code with the
//! recursions in [`crate::detectors`]: every value here is a maximum (or a
//! log-sum-exp) over explicitly listed tuples `1 <= v1 <= ... <= vL <= k+1`.
//! All arithmetic stays in the log domain.

use thiserror::Error;

use crate::models::{ModelError, PhaseModel};
use crate::numerics::LogSumExp;

pub const MAX_WINDOW: usize = 30;
pub const MAX_PHASES: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("window of k = {k} samples with L = {l} exceeds the brute-force limits (k <= {MAX_WINDOW}, L <= {MAX_PHASES})")]
    WindowTooLarge { k: usize, l: usize },
    #[error("brute force needs at least one sample")]
    EmptyWindow,
    #[error("mixture statistics are implemented for L = 2 only; model has L = {0}")]
    UnsupportedL(usize),
    #[error("invalid weights or prior: {0}")]
    InvalidPrior(String),
}

/// Maximum over change tuples, with the maximizing tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct TupleStat {
    /// Positive part of the maximum.
    pub value: f64,
    /// Maximum before taking the positive part.
    pub raw: f64,
    /// Lexicographically smallest maximizer `(v1, ..., vL)`, 1-based.
    pub argmax: Vec<usize>,
}

/// Number of tuples `1 <= v1 <= k`, `v1 <= ... <= vL <= k + 1`:
/// all weakly increasing `L`-tuples over `{1..k+1}` minus the all-`(k+1)` one.
pub fn tuple_count(k: usize, l: usize) -> u128 {
    let n = (k + l) as u128;
    let r = l as u128;
    let mut c: u128 = 1;
    for i in 0..r {
        c = c * (n - i) / (i + 1);
    }
    c - 1
}

/// Visits every admissible tuple in lexicographic order.
pub fn for_each_tuple<F: FnMut(&[usize])>(k: usize, l: usize, mut visit: F) {
    fn rec<F: FnMut(&[usize])>(
        pos: usize,
        lo: usize,
        k: usize,
        tuple: &mut Vec<usize>,
        visit: &mut F,
    ) {
        if pos == tuple.len() {
            visit(tuple);
            return;
        }
        let hi = if pos == 0 { k } else { k + 1 };
        for v in lo..=hi {
            tuple[pos] = v;
            rec(pos + 1, v, k, tuple, visit);
        }
    }
    if k == 0 || l == 0 {
        return;
    }
    let mut tuple = vec![0; l];
    rec(0, 1, k, &mut tuple, &mut visit);
}

/// `table[a][b] = sum_{j=a}^{b} (z[j] + offset)` for 0-based `a <= b`,
/// accumulated left to right from each start.
fn range_sums(z: &[f64], offset: f64) -> Vec<Vec<f64>> {
    let k = z.len();
    (0..k)
        .map(|a| {
            let mut row = vec![0.0; k];
            let mut acc = 0.0;
            for b in a..k {
                acc += z[b] + offset;
                row[b] = acc;
            }
            row
        })
        .collect()
}

struct PhaseSums {
    k: usize,
    tables: Vec<Vec<Vec<f64>>>,
}

impl PhaseSums {
    fn new(model: &PhaseModel, samples: &[f64], offsets: &[f64]) -> Result<Self, OracleError> {
        let l = model.num_phases();
        let mut per_phase = vec![Vec::with_capacity(samples.len()); l];
        for &x in samples {
            for (i, col) in per_phase.iter_mut().enumerate() {
                col.push(model.log_likelihood_ratio(i + 1, x)?);
            }
        }
        let tables = per_phase
            .iter()
            .zip(offsets)
            .map(|(z, &off)| range_sums(z, off))
            .collect();
        Ok(Self {
            k: samples.len(),
            tables,
        })
    }

    /// Sum over 1-based `[from, to]`, zero when empty.
    fn range(&self, phase: usize, from: usize, to: usize) -> f64 {
        if from > to {
            0.0
        } else {
            self.tables[phase][from - 1][to - 1]
        }
    }

    /// Log-likelihood ratio of the first `k` samples under `tuple`.
    fn tuple_llr(&self, tuple: &[usize]) -> f64 {
        let l = tuple.len();
        (0..l)
            .map(|i| {
                let end = if i + 1 < l {
                    (tuple[i + 1] - 1).min(self.k)
                } else {
                    self.k
                };
                self.range(i, tuple[i], end)
            })
            .sum()
    }
}

fn check_window(model: &PhaseModel, k: usize) -> Result<(), OracleError> {
    let l = model.num_phases();
    if k == 0 {
        return Err(OracleError::EmptyWindow);
    }
    if k > MAX_WINDOW || l > MAX_PHASES {
        return Err(OracleError::WindowTooLarge { k, l });
    }
    Ok(())
}

fn maximize<F: Fn(&[usize]) -> f64>(k: usize, l: usize, score: F) -> TupleStat {
    let mut raw = f64::NEG_INFINITY;
    let mut argmax = Vec::new();
    for_each_tuple(k, l, |t| {
        let s = score(t);
        if s > raw {
            raw = s;
            argmax = t.to_vec();
        }
    });
    TupleStat {
        value: raw.max(0.0),
        raw,
        argmax,
    }
}

/// D-CuSum statistic `(W[k])^+` by enumeration.
pub fn glr_bruteforce(model: &PhaseModel, samples: &[f64]) -> Result<TupleStat, OracleError> {
    check_window(model, samples.len())?;
    let l = model.num_phases();
    let sums = PhaseSums::new(model, samples, &vec![0.0; l])?;
    Ok(maximize(samples.len(), l, |t| sums.tuple_llr(t)))
}

/// Enumerated maximum with arbitrary log-penalties.
///
/// Each sample spent in phase `i` adds `log_keep[i-1]`; each phase `i < L`
/// that has ended by time `k` adds `log_switch[i-1]`.
pub fn penalized_glr_bruteforce(
    model: &PhaseModel,
    log_switch: &[f64],
    log_keep: &[f64],
    samples: &[f64],
) -> Result<TupleStat, OracleError> {
    check_window(model, samples.len())?;
    let l = model.num_phases();
    if log_switch.len() + 1 != l || log_keep.len() != l {
        return Err(OracleError::InvalidPrior(format!(
            "L = {l} needs {} switch and {l} keep penalties",
            l - 1
        )));
    }
    let k = samples.len();
    let sums = PhaseSums::new(model, samples, log_keep)?;
    Ok(maximize(k, l, |t| {
        let ended: f64 = (0..l - 1)
            .filter(|&i| k >= t[i + 1])
            .map(|i| log_switch[i])
            .sum();
        sums.tuple_llr(t) + ended
    }))
}

/// WD-CuSum statistic `(W~[k])^+` by enumeration with geometric weights
/// `rho_1..rho_(L-1)`.
pub fn weighted_glr_bruteforce(
    model: &PhaseModel,
    rho: &[f64],
    samples: &[f64],
) -> Result<TupleStat, OracleError> {
    let l = model.num_phases();
    if rho.len() + 1 != l || rho.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
        return Err(OracleError::InvalidPrior(format!(
            "need {} weights strictly inside (0, 1); got {rho:?}",
            l - 1
        )));
    }
    let log_switch: Vec<f64> = rho.iter().map(|r| r.ln()).collect();
    // rho_L = 0: the persistent phase carries no per-sample weight.
    let log_keep: Vec<f64> = rho
        .iter()
        .map(|r| (1.0 - r).ln())
        .chain(std::iter::once(0.0))
        .collect();
    penalized_glr_bruteforce(model, &log_switch, &log_keep, samples)
}

/// Prior on the transient duration `d1` of a two-phase model.
#[derive(Clone, Debug, PartialEq)]
pub enum DurationPrior {
    /// `g(d) = rho (1 - rho)^d`.
    Geometric { rho: f64 },
    /// `g(d) = mass[d]`; any mass missing from the table sits beyond it.
    Table { mass: Vec<f64> },
}

impl DurationPrior {
    pub fn validate(&self) -> Result<(), OracleError> {
        match self {
            DurationPrior::Geometric { rho } => {
                if !(*rho > 0.0 && *rho < 1.0) {
                    return Err(OracleError::InvalidPrior(format!(
                        "geometric rho must lie in (0, 1); got {rho}"
                    )));
                }
            }
            DurationPrior::Table { mass } => {
                if mass.iter().any(|m| !m.is_finite() || *m < 0.0) {
                    return Err(OracleError::InvalidPrior("masses must be >= 0".into()));
                }
                if mass.iter().sum::<f64>() > 1.0 + 1e-12 {
                    return Err(OracleError::InvalidPrior("masses exceed 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn log_pmf(&self, d: usize) -> f64 {
        match self {
            DurationPrior::Geometric { rho } => rho.ln() + d as f64 * (1.0 - rho).ln(),
            DurationPrior::Table { mass } => mass.get(d).map_or(f64::NEG_INFINITY, |m| m.ln()),
        }
    }

    /// `log G(x)` with `G(x) = sum_{d > x} g(d)`.
    pub fn log_tail(&self, x: usize) -> f64 {
        match self {
            DurationPrior::Geometric { rho } => (x + 1) as f64 * (1.0 - rho).ln(),
            DurationPrior::Table { mass } => {
                let remainder = (1.0 - mass.iter().sum::<f64>()).max(0.0);
                let beyond: f64 = mass.iter().skip(x + 1).sum();
                (remainder + beyond).ln()
            }
        }
    }
}

/// For each `v1`, the log of every mixture term
/// `g(d1) Lambda1[v1, v1+d1) Lambda2[v1+d1, k]` plus the tail term
/// `G(k - v1) Lambda1[v1, k]`.
fn mixture_terms(
    model: &PhaseModel,
    prior: &DurationPrior,
    samples: &[f64],
) -> Result<Vec<Vec<f64>>, OracleError> {
    if model.num_phases() != 2 {
        return Err(OracleError::UnsupportedL(model.num_phases()));
    }
    check_window(model, samples.len())?;
    prior.validate()?;
    let k = samples.len();
    let sums = PhaseSums::new(model, samples, &[0.0, 0.0])?;
    Ok((1..=k)
        .map(|v1| {
            let mut terms: Vec<f64> = (0..=k - v1)
                .map(|d1| {
                    let v2 = v1 + d1;
                    prior.log_pmf(d1) + sums.range(0, v1, v2 - 1) + sums.range(1, v2, k)
                })
                .collect();
            terms.push(prior.log_tail(k - v1) + sums.range(0, v1, k));
            terms
        })
        .collect())
}

/// Mixture statistic `W'[k] = max_v1 log sum_d1 Gamma(k, v1, d1) g(d1)` (not
/// floored at zero).
pub fn mixture_glr(
    model: &PhaseModel,
    prior: &DurationPrior,
    samples: &[f64],
) -> Result<f64, OracleError> {
    Ok(mixture_terms(model, prior, samples)?
        .iter()
        .map(|terms| {
            let mut acc = LogSumExp::new();
            terms.iter().for_each(|&t| acc.push(t));
            acc.value()
        })
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Mixture Shiryaev-Roberts statistic `log R[k]`, summing over `v1` as well.
pub fn mixture_sr_statistic(
    model: &PhaseModel,
    prior: &DurationPrior,
    samples: &[f64],
) -> Result<f64, OracleError> {
    let mut acc = LogSumExp::new();
    for terms in mixture_terms(model, prior, samples)? {
        terms.iter().for_each(|&t| acc.push(t));
    }
    Ok(acc.value())
}
