// SPDX-License-Identifier: MIT OR Apache-2.0

//! Phase densities, log-likelihood ratios and information quantities.
//!
//! A [`PhaseModel`] holds the pre-change density `f0`, the transient densities
//! `f1..f(L-1)` and the persistent density `fL`. Everything downstream talks to
//! the data only through [`PhaseModel::llr_into`] and friends.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{golden_section_min, integrate, log_sum_exp, mean_and_stderr};
use crate::rng::{domain, stream_rng};

/// Log-likelihood ratio reported where the numerator density vanishes but
/// `f0` does not. Finite so recursions stay in ordinary arithmetic.
pub const LLR_FLOOR: f64 = -1e12;

/// Absolute tolerance on the total mass of a step density.
pub const STEP_MASS_TOLERANCE: f64 = 1e-12;

const KL_QUADRATURE_TOLERANCE: f64 = 1e-10;
const GAUSSIAN_HALF_WIDTH: f64 = 20.0;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("observation {x} lies outside the support of the pre-change density")]
    OutOfSupport { x: f64 },
    #[error("KL divergence of phase {phase} is infinite (support not contained in that of f0)")]
    DivergentKl { phase: usize },
    #[error("phase {phase} out of range 1..={l}")]
    PhaseOutOfRange { phase: usize, l: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numerical overflow while estimating the Chernoff exponent")]
    NumericalOverflow,
    #[error("cannot read model file: {0}")]
    Io(String),
    #[error("cannot parse model file: {0}")]
    Parse(String),
}

/// A univariate density.
///
/// Step densities use the pieces `[b0, b1], (b1, b2], ..., (b(n-1), bn]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Density {
    Gaussian {
        mean: f64,
        stdev: f64,
    },
    #[serde(rename = "step")]
    PiecewiseConstant {
        breakpoints: Vec<f64>,
        heights: Vec<f64>,
    },
}

impl Density {
    pub fn gaussian(mean: f64, stdev: f64) -> Result<Self, ModelError> {
        let d = Density::Gaussian { mean, stdev };
        d.validate()?;
        Ok(d)
    }

    pub fn step(breakpoints: Vec<f64>, heights: Vec<f64>) -> Result<Self, ModelError> {
        let d = Density::PiecewiseConstant {
            breakpoints,
            heights,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Density::Gaussian { mean, stdev } => {
                if !mean.is_finite() {
                    return Err(ModelError::InvalidDensity(format!(
                        "gaussian mean must be finite; got {mean}"
                    )));
                }
                if !stdev.is_finite() || *stdev <= 0.0 {
                    return Err(ModelError::InvalidDensity(format!(
                        "gaussian stdev must be finite and > 0; got {stdev}"
                    )));
                }
            }
            Density::PiecewiseConstant {
                breakpoints,
                heights,
            } => {
                if heights.is_empty() {
                    return Err(ModelError::InvalidDensity(
                        "step density needs at least one piece".into(),
                    ));
                }
                if breakpoints.len() != heights.len() + 1 {
                    return Err(ModelError::InvalidDensity(format!(
                        "step density with {} heights needs {} breakpoints; got {}",
                        heights.len(),
                        heights.len() + 1,
                        breakpoints.len()
                    )));
                }
                if breakpoints.iter().any(|b| !b.is_finite()) {
                    return Err(ModelError::InvalidDensity(
                        "breakpoints must be finite".into(),
                    ));
                }
                if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(ModelError::InvalidDensity(
                        "breakpoints must be strictly ascending".into(),
                    ));
                }
                if heights.iter().any(|h| !h.is_finite() || *h < 0.0) {
                    return Err(ModelError::InvalidDensity(
                        "heights must be finite and nonnegative".into(),
                    ));
                }
                let mass: f64 = heights
                    .iter()
                    .zip(breakpoints.windows(2))
                    .map(|(h, w)| h * (w[1] - w[0]))
                    .sum();
                if (mass - 1.0).abs() > STEP_MASS_TOLERANCE {
                    return Err(ModelError::InvalidDensity(format!(
                        "step density integrates to {mass}, not 1"
                    )));
                }
            }
        }
        Ok(())
    }

    fn step_piece(breakpoints: &[f64], x: f64) -> Option<usize> {
        let p = breakpoints.partition_point(|&b| b < x);
        if p == 0 {
            (x == breakpoints[0]).then_some(0)
        } else if p >= breakpoints.len() {
            None
        } else {
            Some(p - 1)
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match self {
            Density::Gaussian { .. } => self.ln_pdf(x).exp(),
            Density::PiecewiseConstant {
                breakpoints,
                heights,
            } => Self::step_piece(breakpoints, x).map_or(0.0, |j| heights[j]),
        }
    }

    /// Natural log of the density; `-inf` where it vanishes.
    pub fn ln_pdf(&self, x: f64) -> f64 {
        match self {
            Density::Gaussian { mean, stdev } => {
                let u = (x - mean) / stdev;
                -0.5 * u * u - stdev.ln() - LN_SQRT_2PI
            }
            Density::PiecewiseConstant { .. } => self.pdf(x).ln(),
        }
    }

    /// Closed interval outside of which the density is zero.
    pub fn support(&self) -> (f64, f64) {
        match self {
            Density::Gaussian { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            Density::PiecewiseConstant { breakpoints, .. } => {
                (breakpoints[0], breakpoints[breakpoints.len() - 1])
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Density::Gaussian { mean, stdev } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + stdev * z
            }
            Density::PiecewiseConstant {
                breakpoints,
                heights,
            } => {
                let u: f64 = rng.random();
                let mut below = 0.0;
                let last = heights.len() - 1;
                for (j, h) in heights.iter().enumerate() {
                    let width = breakpoints[j + 1] - breakpoints[j];
                    let mass = h * width;
                    if mass > 0.0 && (u < below + mass || j == last) {
                        let x = breakpoints[j] + (u - below) / h;
                        return x.clamp(breakpoints[j], breakpoints[j + 1]);
                    }
                    below += mass;
                }
                // Rounding left `u` past the final nonempty piece.
                let j = heights.iter().rposition(|&h| h > 0.0).unwrap_or(last);
                breakpoints[j + 1]
            }
        }
    }
}

/// `log(num(x) / den(x))` with the floor sentinel where `num` vanishes.
pub fn log_ratio(num: &Density, den: &Density, x: f64) -> Result<f64, ModelError> {
    let ln_den = den.ln_pdf(x);
    if ln_den == f64::NEG_INFINITY {
        return Err(ModelError::OutOfSupport { x });
    }
    let ln_num = num.ln_pdf(x);
    if ln_num == f64::NEG_INFINITY {
        return Ok(LLR_FLOOR);
    }
    Ok(ln_num - ln_den)
}

fn gaussian_kl(m1: f64, s1: f64, m0: f64, s0: f64) -> f64 {
    let d = m1 - m0;
    (s0 / s1).ln() + (s1 * s1 + d * d) / (2.0 * s0 * s0) - 0.5
}

fn step_step_kl(p: &Density, q: &Density) -> Option<f64> {
    let (
        Density::PiecewiseConstant {
            breakpoints: pb, ..
        },
        Density::PiecewiseConstant {
            breakpoints: qb, ..
        },
    ) = (p, q)
    else {
        return None;
    };
    let mut cuts: Vec<f64> = pb.iter().chain(qb.iter()).copied().collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let hp = p.pdf(mid);
        if hp == 0.0 {
            continue;
        }
        let hq = q.pdf(mid);
        if hq == 0.0 {
            return Some(f64::INFINITY);
        }
        total += hp * (w[1] - w[0]) * (hp / hq).ln();
    }
    Some(total)
}

/// `KL(p || q)` by adaptive quadrature, for any pair of supported families.
///
/// Returns `+inf` when `p` puts mass where `q` vanishes.
pub fn kl_by_quadrature(p: &Density, q: &Density) -> f64 {
    let integrand = |x: f64| {
        let lp = p.ln_pdf(x);
        if lp == f64::NEG_INFINITY {
            return 0.0;
        }
        lp.exp() * (lp - q.ln_pdf(x))
    };
    match p {
        Density::Gaussian { mean, stdev } => {
            if let Density::PiecewiseConstant { .. } = q {
                return f64::INFINITY;
            }
            let lo = mean - GAUSSIAN_HALF_WIDTH * stdev;
            let hi = mean + GAUSSIAN_HALF_WIDTH * stdev;
            integrate(integrand, lo, hi, KL_QUADRATURE_TOLERANCE, 64)
        }
        Density::PiecewiseConstant {
            breakpoints,
            heights,
        } => {
            if let Density::PiecewiseConstant { .. } = q {
                return step_step_kl(p, q).unwrap_or(f64::INFINITY);
            }
            let mut total = 0.0;
            for (j, &h) in heights.iter().enumerate() {
                if h == 0.0 {
                    continue;
                }
                let (a, b) = (breakpoints[j], breakpoints[j + 1]);
                let piece = |x: f64| h * (h.ln() - q.ln_pdf(x));
                total += integrate(
                    piece,
                    a,
                    b,
                    KL_QUADRATURE_TOLERANCE / heights.len() as f64,
                    8,
                );
            }
            total
        }
    }
}

/// `KL(p || q)`: closed form for two Gaussians, exact refinement sum for two
/// step densities, adaptive quadrature otherwise.
pub fn kl_between(p: &Density, q: &Density) -> f64 {
    match (p, q) {
        (
            Density::Gaussian {
                mean: m1,
                stdev: s1,
            },
            Density::Gaussian {
                mean: m0,
                stdev: s0,
            },
        ) => gaussian_kl(*m1, *s1, *m0, *s0),
        (Density::PiecewiseConstant { .. }, Density::PiecewiseConstant { .. }) => {
            step_step_kl(p, q).unwrap_or(f64::INFINITY)
        }
        _ => kl_by_quadrature(p, q),
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    #[serde(rename = "L")]
    l: usize,
    densities: Vec<Density>,
}

/// Pre-change, transient and persistent densities of one detection problem.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseModel {
    densities: Vec<Density>,
    kl: Vec<f64>,
}

impl PhaseModel {
    /// Builds a model from `f0, f1, ..., fL`. Rejects phases whose KL
    /// divergence from `f0` is zero or infinite.
    pub fn new(densities: Vec<Density>) -> Result<Self, ModelError> {
        if densities.len() < 2 {
            return Err(ModelError::InvalidModel(format!(
                "need f0 and at least one post-change density; got {} densities",
                densities.len()
            )));
        }
        for d in &densities {
            d.validate()?;
        }
        let mut kl = Vec::with_capacity(densities.len() - 1);
        for (i, d) in densities.iter().enumerate().skip(1) {
            let v = kl_between(d, &densities[0]);
            if !v.is_finite() {
                return Err(ModelError::DivergentKl { phase: i });
            }
            if v <= 0.0 {
                return Err(ModelError::InvalidModel(format!(
                    "phase {i} is indistinguishable from f0 (KL = {v})"
                )));
            }
            kl.push(v);
        }
        Ok(Self { densities, kl })
    }

    pub fn from_json_str(s: &str) -> Result<Self, ModelError> {
        let file: ModelFile =
            serde_json::from_str(s).map_err(|e| ModelError::Parse(e.to_string()))?;
        if file.densities.len() != file.l + 1 {
            return Err(ModelError::InvalidModel(format!(
                "L = {} requires {} densities; got {}",
                file.l,
                file.l + 1,
                file.densities.len()
            )));
        }
        Self::new(file.densities)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ModelError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelFile {
            l: self.num_phases(),
            densities: self.densities.clone(),
        })
        .expect("model serializes")
    }

    /// Number of post-change phases `L`.
    pub fn num_phases(&self) -> usize {
        self.densities.len() - 1
    }

    pub fn density(&self, i: usize) -> &Density {
        &self.densities[i]
    }

    pub fn densities(&self) -> &[Density] {
        &self.densities
    }

    fn check_phase(&self, i: usize) -> Result<(), ModelError> {
        if i == 0 || i > self.num_phases() {
            return Err(ModelError::PhaseOutOfRange {
                phase: i,
                l: self.num_phases(),
            });
        }
        Ok(())
    }

    /// `Z_i(x) = log f_i(x) - log f_0(x)`.
    pub fn log_likelihood_ratio(&self, i: usize, x: f64) -> Result<f64, ModelError> {
        self.check_phase(i)?;
        log_ratio(&self.densities[i], &self.densities[0], x)
    }

    /// Writes `Z_1(x), ..., Z_L(x)` into `out` (length `L`).
    pub fn llr_into(&self, x: f64, out: &mut [f64]) -> Result<(), ModelError> {
        debug_assert_eq!(out.len(), self.num_phases());
        let ln0 = self.densities[0].ln_pdf(x);
        if ln0 == f64::NEG_INFINITY {
            return Err(ModelError::OutOfSupport { x });
        }
        for (z, d) in out.iter_mut().zip(&self.densities[1..]) {
            let ln = d.ln_pdf(x);
            *z = if ln == f64::NEG_INFINITY {
                LLR_FLOOR
            } else {
                ln - ln0
            };
        }
        Ok(())
    }

    pub fn llr_vec(&self, x: f64) -> Result<Vec<f64>, ModelError> {
        let mut out = vec![0.0; self.num_phases()];
        self.llr_into(x, &mut out)?;
        Ok(out)
    }

    /// `I_i = KL(f_i || f_0)`, cached at construction.
    pub fn kl_divergence(&self, i: usize) -> Result<f64, ModelError> {
        self.check_phase(i)?;
        Ok(self.kl[i - 1])
    }

    pub fn kl_all(&self) -> &[f64] {
        &self.kl
    }

    /// `Phi(x) = log(max_i f_i(x) / f_0(x))`.
    pub fn phi(&self, x: f64) -> Result<f64, ModelError> {
        let ln0 = self.densities[0].ln_pdf(x);
        if ln0 == f64::NEG_INFINITY {
            return Err(ModelError::OutOfSupport { x });
        }
        let best = self.densities[1..]
            .iter()
            .map(|d| d.ln_pdf(x))
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(if best == f64::NEG_INFINITY {
            LLR_FLOOR
        } else {
            best - ln0
        })
    }

    /// `E_{f0}[(f_i / f_0)^2]` per observation; `+inf` when it diverges.
    pub fn ratio_second_moment(&self, i: usize) -> Result<f64, ModelError> {
        self.check_phase(i)?;
        let p = &self.densities[i];
        let q = &self.densities[0];
        let value = match (p, q) {
            (
                Density::Gaussian {
                    mean: m1,
                    stdev: s1,
                },
                Density::Gaussian {
                    mean: m0,
                    stdev: s0,
                },
            ) => {
                // Integral of N(m1,s1)^2 / N(m0,s0).
                let a = 2.0 / (s1 * s1) - 1.0 / (s0 * s0);
                if a <= 0.0 {
                    f64::INFINITY
                } else {
                    let b = 2.0 * m1 / (s1 * s1) - m0 / (s0 * s0);
                    let c = m1 * m1 / (s1 * s1) - m0 * m0 / (2.0 * s0 * s0);
                    let log_norm = (s0 / (s1 * s1)).ln() - 0.5 * (2.0 * PI).ln();
                    (log_norm + 0.5 * (2.0 * PI / a).ln() + b * b / (2.0 * a) - c).exp()
                }
            }
            _ => {
                let (lo, hi) = match p {
                    Density::Gaussian { mean, stdev } => (
                        mean - GAUSSIAN_HALF_WIDTH * stdev,
                        mean + GAUSSIAN_HALF_WIDTH * stdev,
                    ),
                    _ => p.support(),
                };
                if let Density::PiecewiseConstant { .. } = q {
                    let (qa, qb) = q.support();
                    if lo < qa || hi > qb {
                        return Ok(f64::INFINITY);
                    }
                }
                integrate(
                    |x| {
                        let lp = p.ln_pdf(x);
                        if lp == f64::NEG_INFINITY {
                            0.0
                        } else {
                            (2.0 * lp - q.ln_pdf(x)).exp()
                        }
                    },
                    lo,
                    hi,
                    1e-10,
                    256,
                )
            }
        };
        Ok(value)
    }

    /// Monte Carlo Chernoff exponent for the regeneration-time tail.
    ///
    /// Certifies `E_{f0}[Phi] < 0` only when the sample mean plus three
    /// standard errors is negative; otherwise reports
    /// [`AlphaOutcome::NotApplicable`].
    pub fn estimate_alpha(&self, n_samples: usize, seed: u64) -> Result<AlphaOutcome, ModelError> {
        if n_samples < 10_000 {
            return Err(ModelError::InvalidArgument(format!(
                "estimate_alpha needs at least 10^4 samples; got {n_samples}"
            )));
        }
        let mut rng = stream_rng(seed, domain::ALPHA, 0);
        let f0 = &self.densities[0];
        let phis = (0..n_samples)
            .map(|_| self.phi(f0.sample(&mut rng)))
            .collect::<Result<Vec<_>, _>>()?;
        let (mean_phi, stderr) = mean_and_stderr(&phis);
        if mean_phi + 3.0 * stderr >= 0.0 {
            return Ok(AlphaOutcome::NotApplicable { mean_phi, stderr });
        }
        let ln_n = (n_samples as f64).ln();
        let mut centered = vec![0.0; n_samples];
        let mut overflow = false;
        let objective = |t: f64| {
            for (c, p) in centered.iter_mut().zip(&phis) {
                *c = t * (p - mean_phi);
            }
            let theta = log_sum_exp(&centered) - ln_n;
            if !theta.is_finite() {
                overflow = true;
            }
            theta + t * mean_phi
        };
        let (t_star, min_value) = golden_section_min(objective, 0.0, 50.0, 1e-6);
        if overflow {
            return Err(ModelError::NumericalOverflow);
        }
        Ok(AlphaOutcome::Certified(AlphaEstimate {
            alpha: -min_value,
            t_star,
            mean_phi,
            stderr,
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AlphaEstimate {
    pub alpha: f64,
    /// Minimizing Chernoff parameter.
    pub t_star: f64,
    pub mean_phi: f64,
    pub stderr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum AlphaOutcome {
    Certified(AlphaEstimate),
    NotApplicable { mean_phi: f64, stderr: f64 },
}

impl AlphaOutcome {
    pub fn alpha(&self) -> Option<f64> {
        match self {
            AlphaOutcome::Certified(a) => Some(a.alpha),
            AlphaOutcome::NotApplicable { .. } => None,
        }
    }
}

/// Ready-made models used by tests, examples and the CLI documentation.
pub mod presets {
    use super::{Density, PhaseModel};

    pub fn gaussian_means(means: &[f64]) -> PhaseModel {
        let densities = std::iter::once(0.0)
            .chain(means.iter().copied())
            .map(|m| Density::gaussian(m, 1.0).expect("valid gaussian"))
            .collect();
        PhaseModel::new(densities).expect("valid gaussian model")
    }

    /// Uniform `f0` on `[0, 2]` with two step alternatives whose larger
    /// likelihood ratio exceeds one everywhere, so D-CuSum never regenerates.
    pub fn never_regenerating() -> PhaseModel {
        let bp = vec![0.0, 1.0, 2.0];
        PhaseModel::new(vec![
            Density::step(vec![0.0, 2.0], vec![0.5]).unwrap(),
            Density::step(bp.clone(), vec![0.8, 0.2]).unwrap(),
            Density::step(bp, vec![0.2, 0.8]).unwrap(),
        ])
        .unwrap()
    }

    /// `f1 = N(0.3, 1)`, `f2 = N(-0.3, 1)` against `f0 = N(0, 1)`.
    pub fn weak_symmetric() -> PhaseModel {
        gaussian_means(&[0.3, -0.3])
    }

    /// `f1 = N(3, 1)`, `f2 = N(1, 1)` against `f0 = N(0, 1)`.
    pub fn strong_then_weak() -> PhaseModel {
        gaussian_means(&[3.0, 1.0])
    }
}

#[cfg(test)]
mod tests {
    use super::presets::*;
    use super::*;
    use crate::rng::stream_rng;

    fn std_normal_pair(mu: f64) -> PhaseModel {
        gaussian_means(&[mu])
    }

    #[test]
    fn llr_at_midpoint_is_zero() {
        let m = std_normal_pair(3.0);
        assert!(m.log_likelihood_ratio(1, 1.5).unwrap().abs() < 1e-12);
    }

    #[test]
    fn llr_matches_linear_closed_form() {
        let m = std_normal_pair(3.0);
        for &x in &[0.0, -2.0, 0.7, 4.1] {
            let closed = 3.0 * x - 4.5;
            let direct = (m.density(1).pdf(x) / m.density(0).pdf(x)).ln();
            let got = m.log_likelihood_ratio(1, x).unwrap();
            assert!((got - closed).abs() < 1e-12, "{x}: {got} vs {closed}");
            assert!((got - direct).abs() < 1e-9);
        }
        assert!((m.log_likelihood_ratio(1, 0.0).unwrap() + 4.5).abs() < 1e-12);
    }

    #[test]
    fn step_llr_uses_height_ratio() {
        let m = never_regenerating();
        let z1 = m.log_likelihood_ratio(1, 0.5).unwrap();
        let z2 = m.log_likelihood_ratio(2, 0.5).unwrap();
        assert!((z1 - 0.470_003_629_245_735_6).abs() < 1e-12);
        assert!((z2 + 0.916_290_731_874_155).abs() < 1e-12);
        // Closed left end of the first piece.
        assert_eq!(m.density(1).pdf(0.0), 0.8);
        assert_eq!(m.density(1).pdf(1.0), 0.8);
        assert_eq!(m.density(1).pdf(2.0), 0.2);
        assert_eq!(m.density(0).pdf(2.000001), 0.0);
    }

    #[test]
    fn out_of_support_and_sentinel() {
        let m = never_regenerating();
        assert!(matches!(
            m.log_likelihood_ratio(1, 2.5),
            Err(ModelError::OutOfSupport { .. })
        ));
        assert!(matches!(m.phi(-0.1), Err(ModelError::OutOfSupport { .. })));

        let f0 = Density::step(vec![0.0, 1.0], vec![1.0]).unwrap();
        let f1 = Density::step(vec![0.0, 0.5, 1.0], vec![2.0, 0.0]).unwrap();
        let m = PhaseModel::new(vec![f0, f1]).unwrap();
        assert_eq!(m.log_likelihood_ratio(1, 0.75).unwrap(), LLR_FLOOR);
        assert!((m.log_likelihood_ratio(1, 0.25).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(m.phi(0.75).unwrap(), LLR_FLOOR);
    }

    #[test]
    fn phase_index_is_checked() {
        let m = std_normal_pair(1.0);
        assert!(matches!(
            m.log_likelihood_ratio(0, 0.0),
            Err(ModelError::PhaseOutOfRange { .. })
        ));
        assert!(m.log_likelihood_ratio(2, 0.0).is_err());
        assert!(m.kl_divergence(2).is_err());
    }

    #[test]
    fn gaussian_kl_values() {
        let m = weak_symmetric();
        assert!((m.kl_divergence(1).unwrap() - 0.045).abs() < 1e-15);
        assert!((m.kl_divergence(2).unwrap() - 0.045).abs() < 1e-15);
        let m = std_normal_pair(3.0);
        assert!((m.kl_divergence(1).unwrap() - 4.5).abs() < 1e-15);
        let n01 = Density::gaussian(0.0, 1.0).unwrap();
        assert_eq!(kl_between(&n01, &n01), 0.0);
    }

    #[test]
    fn quadrature_kl_agrees_with_closed_form() {
        let pairs = [
            ((3.0, 1.0), (0.0, 1.0)),
            ((0.3, 1.0), (0.0, 1.0)),
            ((-1.0, 0.5), (0.2, 2.0)),
            ((0.0, 2.0), (1.0, 1.3)),
        ];
        for ((m1, s1), (m0, s0)) in pairs {
            let p = Density::gaussian(m1, s1).unwrap();
            let q = Density::gaussian(m0, s0).unwrap();
            let closed = kl_between(&p, &q);
            let quad = kl_by_quadrature(&p, &q);
            assert!((closed - quad).abs() < 1e-8, "{closed} vs {quad}");
        }
    }

    #[test]
    fn step_kl_is_exact_and_divergence_detected() {
        let m = never_regenerating();
        let expected = 0.8 * (0.8f64 / 0.5).ln() + 0.2 * (0.2f64 / 0.5).ln();
        assert!((m.kl_divergence(1).unwrap() - expected).abs() < 1e-15);
        assert!((m.kl_divergence(2).unwrap() - expected).abs() < 1e-15);

        let f0 = Density::step(vec![0.0, 1.0], vec![1.0]).unwrap();
        let wide = Density::step(vec![0.0, 2.0], vec![0.5]).unwrap();
        assert!(matches!(
            PhaseModel::new(vec![f0.clone(), wide]),
            Err(ModelError::DivergentKl { phase: 1 })
        ));
        let g = Density::gaussian(0.5, 1.0).unwrap();
        assert!(matches!(
            PhaseModel::new(vec![f0, g]),
            Err(ModelError::DivergentKl { phase: 1 })
        ));
    }

    #[test]
    fn mixed_kl_uses_quadrature() {
        // Step f1 on [0, 1] against N(0, 1): closed form of
        // ∫ 1·(0 - log φ(x)) dx over [0, 1] = log sqrt(2π) + 1/6.
        let f0 = Density::gaussian(0.0, 1.0).unwrap();
        let f1 = Density::step(vec![0.0, 1.0], vec![1.0]).unwrap();
        let m = PhaseModel::new(vec![f0, f1]).unwrap();
        let expected = LN_SQRT_2PI + 1.0 / 6.0;
        assert!((m.kl_divergence(1).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn identical_phase_rejected() {
        let n = Density::gaussian(0.0, 1.0).unwrap();
        assert!(matches!(
            PhaseModel::new(vec![n.clone(), n]),
            Err(ModelError::InvalidModel(_))
        ));
    }

    #[test]
    fn density_validation() {
        assert!(Density::gaussian(0.0, 0.0).is_err());
        assert!(Density::gaussian(f64::NAN, 1.0).is_err());
        assert!(Density::step(vec![0.0, 1.0], vec![0.9]).is_err());
        assert!(Density::step(vec![1.0, 0.0], vec![1.0]).is_err());
        assert!(Density::step(vec![0.0], vec![]).is_err());
        assert!(Density::step(vec![0.0, 0.5, 1.0], vec![-1.0, 3.0]).is_err());
        assert!(Density::step(vec![0.0, 0.5, 1.0], vec![1.5, 0.5]).is_ok());
    }

    #[test]
    fn phi_examples() {
        let m = never_regenerating();
        assert!((m.phi(0.5).unwrap() - (0.8f64 / 0.5).ln()).abs() < 1e-12);
        let m = weak_symmetric();
        assert!((m.phi(0.0).unwrap() + 0.045).abs() < 1e-12);
        let m = std_normal_pair(2.0);
        for &x in &[-1.0, 0.3, 5.0] {
            assert_eq!(m.phi(x).unwrap(), m.log_likelihood_ratio(1, x).unwrap());
        }
    }

    #[test]
    fn json_roundtrip_and_schema() {
        let text = r#"{"L": 2, "densities": [
            {"family":"step","breakpoints":[0,2],"heights":[0.5]},
            {"family":"step","breakpoints":[0,1,2],"heights":[0.8,0.2]},
            {"family":"step","breakpoints":[0,1,2],"heights":[0.2,0.8]}]}"#;
        let m = PhaseModel::from_json_str(text).unwrap();
        assert_eq!(m, never_regenerating());
        let back = PhaseModel::from_json_str(&m.to_json()).unwrap();
        assert_eq!(back, m);

        let g = r#"{"L":1,"densities":[{"family":"gaussian","mean":0,"stdev":1},{"family":"gaussian","mean":1,"stdev":1}]}"#;
        assert_eq!(PhaseModel::from_json_str(g).unwrap().num_phases(), 1);
        let wrong_l = r#"{"L":2,"densities":[{"family":"gaussian","mean":0,"stdev":1},{"family":"gaussian","mean":1,"stdev":1}]}"#;
        assert!(matches!(
            PhaseModel::from_json_str(wrong_l),
            Err(ModelError::InvalidModel(_))
        ));
        let bad = r#"{"L":1,"densities":[{"family":"step","breakpoints":[0,1],"heights":[0.9]},{"family":"gaussian","mean":1,"stdev":1}]}"#;
        assert!(matches!(
            PhaseModel::from_json_str(bad),
            Err(ModelError::InvalidDensity(_))
        ));
    }

    #[test]
    fn step_sampling_stays_in_support_and_matches_masses() {
        let d = Density::step(vec![0.0, 1.0, 1.5, 2.0], vec![0.5, 0.0, 1.0]).unwrap();
        let mut rng = stream_rng(1, 0, 0);
        let n = 40_000;
        let mut first = 0;
        for _ in 0..n {
            let x = d.sample(&mut rng);
            assert!((0.0..=2.0).contains(&x));
            assert!(!(x > 1.0 && x < 1.5), "sampled from an empty piece: {x}");
            if x <= 1.0 {
                first += 1;
            }
        }
        let frac = first as f64 / n as f64;
        assert!((frac - 0.5).abs() < 4.0 * (0.25f64 / n as f64).sqrt());
    }

    #[test]
    fn ratio_second_moment_gaussian_matches_quadrature() {
        let m = gaussian_means(&[0.3, -1.0]);
        for i in 1..=2 {
            let mu: f64 = if i == 1 { 0.3 } else { -1.0 };
            let exact = (mu * mu).exp();
            assert!((m.ratio_second_moment(i).unwrap() - exact).abs() < 1e-12);
        }
        let m = never_regenerating();
        let exact = 0.8f64 * 0.8 / 0.5 + 0.2 * 0.2 / 0.5;
        assert!((m.ratio_second_moment(1).unwrap() - exact).abs() < 1e-9);
    }

    #[test]
    fn alpha_not_applicable_cases() {
        let out = never_regenerating().estimate_alpha(10_000, 3).unwrap();
        assert!(matches!(out, AlphaOutcome::NotApplicable { mean_phi, .. } if mean_phi > 0.0));
        // E[Phi] = 0.3 E|X| - 0.045 under N(0, 1).
        let out = weak_symmetric().estimate_alpha(100_000, 3).unwrap();
        match out {
            AlphaOutcome::NotApplicable { mean_phi, stderr } => {
                let exact = 0.3 * (2.0 / PI).sqrt() - 0.045;
                assert!((mean_phi - exact).abs() < 4.0 * stderr);
            }
            other => panic!("expected NotApplicable, got {other:?}"),
        }
        assert!(matches!(
            weak_symmetric().estimate_alpha(9_999, 0),
            Err(ModelError::InvalidArgument(_))
        ));
    }

    #[test]
    fn alpha_certified_for_strong_then_weak() {
        let m = strong_then_weak();
        let out = m.estimate_alpha(200_000, 11).unwrap();
        let est = match out {
            AlphaOutcome::Certified(e) => e,
            other => panic!("expected certification, got {other:?}"),
        };
        // Quadrature reference values: E[Phi] = -0.483019, alpha = 0.094840.
        assert!((est.mean_phi + 0.483_018_6).abs() < 4.0 * est.stderr);
        assert!((est.alpha - 0.094_84).abs() < 0.01, "alpha = {}", est.alpha);
        assert!(est.t_star > 0.0 && est.t_star < 50.0);
        // Determinism.
        assert_eq!(m.estimate_alpha(200_000, 11).unwrap(), out);
    }
}
