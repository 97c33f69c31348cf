// SPDX-License-Identifier: MIT OR Apache-2.0

//! Threshold and weight selection, and the first-order delay predictor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("invalid design input: {0}")]
    InvalidInput(String),
    #[error("no threshold root found in [{lo}, {hi}]")]
    NoRoot { lo: f64, hi: f64 },
    #[error("empty rho range: lower endpoint {lo} >= upper endpoint {hi}")]
    EmptyRange { lo: f64, hi: f64 },
}

/// Transient duration or change time; `Infinite` means never.
///
/// Serialized as an integer or the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Horizon {
    Finite(u64),
    Infinite,
}

impl Serialize for Horizon {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Horizon::Finite(n) => s.serialize_u64(*n),
            Horizon::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Horizon {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) => Ok(Horizon::Finite(n)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl Horizon {
    pub fn as_f64(&self) -> f64 {
        match self {
            Horizon::Finite(n) => *n as f64,
            Horizon::Infinite => f64::INFINITY,
        }
    }
}

impl std::fmt::Display for Horizon {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Horizon::Finite(n) => write!(f, "{n}"),
            Horizon::Infinite => write!(f, "inf"),
        }
    }
}

impl std::str::FromStr for Horizon {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") {
            return Ok(Horizon::Infinite);
        }
        s.parse::<u64>()
            .map(Horizon::Finite)
            .map_err(|_| format!("expected a nonnegative integer or 'inf', got {s:?}"))
    }
}

fn check_gamma(gamma: f64) -> Result<(), DesignError> {
    if !gamma.is_finite() || gamma <= 1.0 {
        return Err(DesignError::InvalidInput(format!(
            "ARL target gamma must be finite and > 1; got {gamma}"
        )));
    }
    Ok(())
}

fn check_kl(kl: &[f64]) -> Result<(), DesignError> {
    if kl.is_empty() || kl.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(DesignError::InvalidInput(format!(
            "KL divergences must be positive and finite; got {kl:?}"
        )));
    }
    Ok(())
}

/// WD-CuSum threshold guaranteeing ARL >= gamma: `b = log(gamma) + log 2`.
pub fn wdcusum_threshold(gamma: f64) -> Result<f64, DesignError> {
    check_gamma(gamma)?;
    Ok(gamma.ln() + std::f64::consts::LN_2)
}

/// Log of the D-CuSum ARL lower bound `e^b / (1 + (b/alpha)^(L+1))`.
pub fn dcusum_arl_lower_bound_ln(b: f64, alpha: f64, num_phases: usize) -> f64 {
    let ratio_ln = (num_phases as f64 + 1.0) * (b / alpha).ln();
    // log(1 + e^r) without overflow.
    let denom_ln = if ratio_ln > 0.0 {
        ratio_ln + (-ratio_ln).exp().ln_1p()
    } else {
        ratio_ln.exp().ln_1p()
    };
    b - denom_ln
}

/// D-CuSum threshold: root of `e^b = gamma (1 + (b/alpha)^(L+1))` on the
/// branch `b >= log gamma`, by bisection to 1e-9.
///
/// The nominal upper bracket is
/// `log gamma + (L+1) log(1 + log gamma / alpha) + 10`; for very small
/// `alpha` it can sit below the root, in which case it is doubled until the
/// sign changes.
pub fn dcusum_threshold(gamma: f64, alpha: f64, num_phases: usize) -> Result<f64, DesignError> {
    check_gamma(gamma)?;
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(DesignError::InvalidInput(format!(
            "alpha must be positive and finite; got {alpha}"
        )));
    }
    if num_phases == 0 {
        return Err(DesignError::InvalidInput("L must be >= 1".into()));
    }
    let log_gamma = gamma.ln();
    let f = |b: f64| dcusum_arl_lower_bound_ln(b, alpha, num_phases) - log_gamma;
    let lo = log_gamma;
    let nominal_hi = log_gamma + (num_phases as f64 + 1.0) * (1.0 + log_gamma / alpha).ln() + 10.0;
    let mut hi = nominal_hi;
    let mut doublings = 0;
    while f(hi) <= 0.0 {
        if doublings == 60 {
            return Err(DesignError::NoRoot { lo, hi: nominal_hi });
        }
        hi *= 2.0;
        doublings += 1;
    }
    let (mut a, mut b) = (lo, hi);
    while b - a > 1e-9 {
        let mid = 0.5 * (a + b);
        if f(mid) > 0.0 {
            b = mid;
        } else {
            a = mid;
        }
    }
    Ok(b)
}

/// Range of `rho_1` keeping the transient drift loss below `delta1 * I1` and
/// the persistent-phase penalty below `delta2 * b`:
/// `exp(-delta2 b) < rho_1 < 1 - exp(-delta1 I1)`.
pub fn rho_range(b: f64, i1: f64, delta1: f64, delta2: f64) -> Result<(f64, f64), DesignError> {
    if !b.is_finite() || b <= 0.0 {
        return Err(DesignError::InvalidInput(format!("b must be > 0; got {b}")));
    }
    if !i1.is_finite() || i1 <= 0.0 {
        return Err(DesignError::InvalidInput(format!(
            "I1 must be > 0; got {i1}"
        )));
    }
    for d in [delta1, delta2] {
        if !(d > 0.0 && d < 1.0) {
            return Err(DesignError::InvalidInput(format!(
                "deltas must lie in (0, 1); got {d}"
            )));
        }
    }
    let lo = (-delta2 * b).exp();
    let hi = -(-delta1 * i1).exp_m1();
    if lo >= hi {
        return Err(DesignError::EmptyRange { lo, hi });
    }
    Ok((lo, hi))
}

/// Regime constants `c_1..c_(L-1)`; `c_L = inf` is implicit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeVector(pub Vec<f64>);

impl RegimeVector {
    pub fn new(c: Vec<f64>) -> Result<Self, DesignError> {
        if c.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(DesignError::InvalidInput(format!(
                "regime constants must be >= 0 (inf allowed); got {c:?}"
            )));
        }
        Ok(Self(c))
    }
}

/// Plug-in regime constants `c_i = d_i I_i / log gamma`.
pub fn regime_vector(
    durations: &[Horizon],
    gamma: f64,
    kl: &[f64],
) -> Result<RegimeVector, DesignError> {
    check_gamma(gamma)?;
    check_kl(kl)?;
    if durations.len() + 1 != kl.len() {
        return Err(DesignError::InvalidInput(format!(
            "{} KL values need {} durations; got {}",
            kl.len(),
            kl.len() - 1,
            durations.len()
        )));
    }
    let log_gamma = gamma.ln();
    RegimeVector::new(
        durations
            .iter()
            .zip(kl)
            .map(|(d, i)| match d {
                Horizon::Infinite => f64::INFINITY,
                Horizon::Finite(n) => *n as f64 * i / log_gamma,
            })
            .collect(),
    )
}

/// First-order WADD: with `h` the first phase at which the cumulative `c`
/// reaches one, `log gamma (sum_{i<h} c_i/I_i + (1 - sum_{i<h} c_i)/I_h)`.
pub fn asymptotic_wadd(gamma: f64, c: &RegimeVector, kl: &[f64]) -> Result<f64, DesignError> {
    check_gamma(gamma)?;
    check_kl(kl)?;
    if c.0.len() + 1 != kl.len() {
        return Err(DesignError::InvalidInput(format!(
            "{} KL values need {} regime constants; got {}",
            kl.len(),
            kl.len() - 1,
            c.0.len()
        )));
    }
    let mut spent = 0.0;
    let mut rate_sum = 0.0;
    for (i, &ki) in kl.iter().enumerate() {
        let ci = c.0.get(i).copied().unwrap_or(f64::INFINITY);
        if spent + ci >= 1.0 {
            return Ok(gamma.ln() * (rate_sum + (1.0 - spent) / ki));
        }
        spent += ci;
        rate_sum += ci / ki;
    }
    unreachable!("c_L = inf closes the loop")
}

/// Inputs of a design card; optional parts are skipped when absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignInput {
    pub gamma: f64,
    /// Certified Chernoff exponent; without it no D-CuSum threshold is given.
    pub alpha: Option<f64>,
    pub num_phases: usize,
    /// `I_1..I_L`; required for the rho range and delay predictions.
    pub kl: Vec<f64>,
    pub deltas: Option<(f64, f64)>,
    pub regimes: Vec<RegimeVector>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RhoRange {
    /// Threshold the lower endpoint is computed at (`log gamma`).
    pub b: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WaddPrediction {
    pub c: RegimeVector,
    pub wadd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DesignCard {
    pub gamma: f64,
    pub num_phases: usize,
    pub wdcusum_threshold: f64,
    pub dcusum_threshold: Option<f64>,
    pub rho_range: Option<Result<RhoRange, String>>,
    pub predictions: Vec<WaddPrediction>,
    pub notes: Vec<String>,
}

pub const DCUSUM_UNAVAILABLE: &str = "unavailable: regeneration condition not certified";

impl DesignCard {
    pub fn compute(input: &DesignInput) -> Result<Self, DesignError> {
        check_gamma(input.gamma)?;
        if input.num_phases == 0 {
            return Err(DesignError::InvalidInput("L must be >= 1".into()));
        }
        if !input.kl.is_empty() {
            check_kl(&input.kl)?;
            if input.kl.len() != input.num_phases {
                return Err(DesignError::InvalidInput(format!(
                    "L = {} needs {} KL values; got {}",
                    input.num_phases,
                    input.num_phases,
                    input.kl.len()
                )));
            }
        }
        let dcusum = input
            .alpha
            .map(|a| dcusum_threshold(input.gamma, a, input.num_phases))
            .transpose()?;
        let mut notes = Vec::new();
        let rho = match input.deltas {
            Some((d1, d2)) if input.num_phases >= 2 => {
                let i1 = *input.kl.first().ok_or_else(|| {
                    DesignError::InvalidInput("the rho range needs I_1 (--kl)".into())
                })?;
                let b = input.gamma.ln();
                Some(match rho_range(b, i1, d1, d2) {
                    Ok((lo, hi)) => {
                        notes.push(format!(
                            "note: the upper endpoint is 1 - exp(-delta1 * I1) = {hi:.4}; \
                             it is easily misread as {:.3}",
                            10.0 * hi
                        ));
                        Ok(RhoRange { b, lo, hi })
                    }
                    Err(e @ DesignError::EmptyRange { .. }) => Err(e.to_string()),
                    Err(e) => return Err(e),
                })
            }
            _ => None,
        };
        let predictions = input
            .regimes
            .iter()
            .map(|c| {
                Ok(WaddPrediction {
                    c: c.clone(),
                    wadd: asymptotic_wadd(input.gamma, c, &input.kl)?,
                })
            })
            .collect::<Result<Vec<_>, DesignError>>()?;
        if !predictions.is_empty() {
            notes.push("note: delay predictions are first order only".into());
        }
        Ok(Self {
            gamma: input.gamma,
            num_phases: input.num_phases,
            wdcusum_threshold: wdcusum_threshold(input.gamma)?,
            dcusum_threshold: dcusum,
            rho_range: rho,
            predictions,
            notes,
        })
    }

    pub fn render(&self) -> String {
        let mut out = format!("gamma = {}  L = {}\n", self.gamma, self.num_phases);
        out.push_str(&format!(
            "wdcusum threshold b = {:.6}\n",
            self.wdcusum_threshold
        ));
        match self.dcusum_threshold {
            Some(b) => out.push_str(&format!("dcusum threshold b = {b:.6}\n")),
            None => out.push_str(&format!("dcusum threshold {DCUSUM_UNAVAILABLE}\n")),
        }
        match &self.rho_range {
            Some(Ok(r)) => out.push_str(&format!(
                "rho_1 range at b = {:.4}: ({:.4}, {:.4})\n",
                r.b, r.lo, r.hi
            )),
            Some(Err(msg)) => out.push_str(&format!("rho_1 range: {msg}\n")),
            None => {}
        }
        for p in &self.predictions {
            let c: Vec<String> = p.c.0.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!(
                "predicted wadd at c = [{}]: {:.3}\n",
                c.join(","),
                p.wadd
            ));
        }
        for n in &self.notes {
            out.push_str(n);
            out.push('\n');
        }
        out
    }
}
