//! Analytic Gaussian mechanism accounting.
//!
//! A Gaussian mechanism with L2 sensitivity `Δ` and noise `σ` is (ε, δ)-DP iff
//!
//! ```text
//! Φ(Δ/(2σ) − εσ/Δ) − e^ε · Φ(−Δ/(2σ) − εσ/Δ) ≤ δ
//! ```
//!
//! `T` adaptive compositions of a sensitivity-1 histogram release with noise
//! `σ` are equivalent to one release with noise `σ/√T`, which is the same as
//! a single release with sensitivity `√T` and noise `σ`.
//!
//! `ε = ∞` is represented by `σ = 0` (no noise is drawn).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_BRACKET_DOUBLINGS: usize = 200;

/// Standard normal CDF, accurate to double precision over the whole line.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `ln Φ(x)`. Uses the tail asymptotic series where `Φ(x)` would lose
/// relative precision or underflow.
pub fn log_std_normal_cdf(x: f64) -> f64 {
    if x > -30.0 {
        return std_normal_cdf(x).ln();
    }
    // Φ(x) = φ(x)/|x| · (1 − 1/x² + 3/x⁴ − 15/x⁶ + ...)
    let z2 = 1.0 / (x * x);
    let mut term = 1.0;
    let mut series = 1.0;
    for k in 1..=8 {
        term *= -((2 * k - 1) as f64) * z2;
        series += term;
    }
    -0.5 * x * x - (-x).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + series.ln()
}

/// δ achieved by one Gaussian release at privacy level `epsilon`.
pub fn gaussian_delta(sigma: f64, epsilon: f64, sensitivity: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::domain(format!("sigma must be positive, got {sigma}")));
    }
    if !(sensitivity > 0.0) {
        return Err(Error::domain(format!(
            "sensitivity must be positive, got {sensitivity}"
        )));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::domain(format!(
            "epsilon must be non-negative, got {epsilon}"
        )));
    }
    let half_ratio = sensitivity / (2.0 * sigma);
    let shift = epsilon * sigma / sensitivity;
    let upper = std_normal_cdf(half_ratio - shift);
    let lower = (epsilon + log_std_normal_cdf(-half_ratio - shift)).exp();
    Ok((upper - lower).clamp(0.0, 1.0))
}

/// δ after `iterations` noisy histogram releases with noise `sigma` each:
/// the same as one sensitivity-1 release with noise `sigma / √T`.
pub fn composed_delta(sigma: f64, iterations: u32, epsilon: f64) -> Result<f64> {
    if iterations == 0 {
        return Err(Error::domain("iterations must be at least 1"));
    }
    gaussian_delta(sigma / f64::from(iterations).sqrt(), epsilon, 1.0)
}

/// Smallest σ with `composed_delta(σ, T, ε) ≤ δ`.
pub fn calibrate_sigma(epsilon: f64, delta: f64, iterations: u32) -> Result<f64> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::domain(format!(
            "epsilon must be finite and positive, got {epsilon}"
        )));
    }
    check_delta(delta)?;
    let satisfied = |s: f64| composed_delta(s, iterations, epsilon).map(|d| d <= delta);

    let (mut lo, mut hi) = (1e-3, 1e3);
    let mut doublings = 0;
    while satisfied(lo)? {
        lo /= 2.0;
        doublings += 1;
        if doublings > MAX_BRACKET_DOUBLINGS {
            return Err(Error::Solver("lower sigma bracket did not converge".into()));
        }
    }
    while !satisfied(hi)? {
        hi *= 2.0;
        doublings += 1;
        if doublings > MAX_BRACKET_DOUBLINGS {
            return Err(Error::Solver("upper sigma bracket did not converge".into()));
        }
    }
    // invariant: lo violates, hi satisfies
    while (hi - lo) > 1e-12 * hi {
        let mid = 0.5 * (lo + hi);
        if satisfied(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Smallest ε ≥ 0 with `composed_delta(σ, T, ε) ≤ δ`; `+∞` when `sigma == 0`.
pub fn epsilon_for(sigma: f64, delta: f64, iterations: u32) -> Result<f64> {
    check_delta(delta)?;
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    let satisfied = |e: f64| composed_delta(sigma, iterations, e).map(|d| d <= delta);
    if satisfied(0.0)? {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut doublings = 0;
    while !satisfied(hi)? {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 64 {
            return Ok(f64::INFINITY);
        }
    }
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if satisfied(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("delta must lie in (0, 1), got {delta}")))
    }
}

/// Base of the logarithm in the default δ rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    #[default]
    Natural,
    Ten,
}

/// `1 / (n · log n)`.
pub fn default_delta(n_priv: usize, base: LogBase) -> Result<f64> {
    if n_priv < 2 {
        return Err(Error::domain(format!(
            "default delta needs at least 2 private samples, got {n_priv}"
        )));
    }
    let n = n_priv as f64;
    let log = match base {
        LogBase::Natural => n.ln(),
        LogBase::Ten => n.log10(),
    };
    Ok(1.0 / (n * log))
}

/// The resolved privacy parameters of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    #[serde(with = "crate::config::serde_extended_f64")]
    pub epsilon: f64,
    pub delta: f64,
    pub iterations: u32,
    pub sensitivity: f64,
    pub sigma: f64,
}

impl PrivacySpec {
    /// Calibrates σ for a target ε (`+∞` gives σ = 0).
    pub fn for_epsilon(epsilon: f64, delta: f64, iterations: u32) -> Result<Self> {
        let sigma = if epsilon == f64::INFINITY {
            check_delta(delta)?;
            0.0
        } else {
            calibrate_sigma(epsilon, delta, iterations)?
        };
        Ok(PrivacySpec {
            epsilon,
            delta,
            iterations,
            sensitivity: 1.0,
            sigma,
        })
    }

    /// Uses a fixed σ and reports the ε it achieves.
    pub fn for_sigma(sigma: f64, delta: f64, iterations: u32) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::domain(format!("sigma must be non-negative, got {sigma}")));
        }
        Ok(PrivacySpec {
            epsilon: epsilon_for(sigma, delta, iterations)?,
            delta,
            iterations,
            sensitivity: 1.0,
            sigma,
        })
    }

    /// Noise of the single release equivalent to all iterations.
    pub fn effective_sigma(&self) -> f64 {
        self.sigma / f64::from(self.iterations).sqrt()
    }

    /// δ actually achieved at `epsilon` (0 when no noise and ε = ∞).
    pub fn achieved_delta(&self) -> Result<f64> {
        if self.sigma == 0.0 {
            return Ok(if self.epsilon.is_infinite() { 0.0 } else { 1.0 });
        }
        composed_delta(self.sigma, self.iterations, self.epsilon)
    }
}
