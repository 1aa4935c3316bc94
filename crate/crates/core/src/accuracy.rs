//! Chernoff accuracy calculus relating error bound `alpha`, failure
//! probability `beta`, population `n` and privacy cost `epsilon`.
//!
//! All logarithms are natural.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum AccuracyError {
    #[error("beta = {0} is outside (0,1)")]
    Beta(f64),
    #[error("alpha = {0} must be positive")]
    Alpha(f64),
    #[error("population must be at least 1")]
    Population,
    #[error("epsilon = {0} must be positive and finite")]
    Epsilon(f64),
    #[error("alpha/lambda = {0} must exceed 1 for a finite epsilon")]
    NoFiniteEpsilon(f64),
}

impl AccuracyError {
    pub fn code(&self) -> &'static str {
        match self {
            AccuracyError::Beta(_) => "BETA_DOMAIN",
            AccuracyError::Alpha(_) => "ALPHA_DOMAIN",
            AccuracyError::Population => "POPULATION_DOMAIN",
            AccuracyError::Epsilon(_) => "INFINITE_ALPHA",
            AccuracyError::NoFiniteEpsilon(_) => "NO_FINITE_EPSILON",
        }
    }
}

/// `(1 + e^ε) / (e^ε − 1)`, computed as `1 / tanh(ε/2)`.
fn privacy_factor(epsilon: f64) -> Result<f64, AccuracyError> {
    if epsilon.is_nan() || epsilon <= 0.0 || epsilon.is_infinite() {
        return Err(AccuracyError::Epsilon(epsilon));
    }
    Ok(1.0 / (epsilon / 2.0).tanh())
}

fn check_beta(beta: f64) -> Result<(), AccuracyError> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(AccuracyError::Beta(beta))
    }
}

fn check_n(n: u64) -> Result<(), AccuracyError> {
    if n >= 1 {
        Ok(())
    } else {
        Err(AccuracyError::Population)
    }
}

/// `λ = sqrt(ln(2/β) / 2n)`.
pub fn lambda_of(beta: f64, n: u64) -> Result<f64, AccuracyError> {
    check_beta(beta)?;
    check_n(n)?;
    Ok(((2.0 / beta).ln() / (2.0 * n as f64)).sqrt())
}

pub fn alpha_from(epsilon: f64, beta: f64, n: u64) -> Result<f64, AccuracyError> {
    let lambda = lambda_of(beta, n)?;
    Ok(privacy_factor(epsilon)? * lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BetaBound {
    pub value: f64,
    /// Set when `value ≥ 1`: the bound promises nothing.
    pub vacuous: bool,
}

/// `β = 2·exp(−2λ²n)` with `λ = α / factor(ε)`.
pub fn beta_from(epsilon: f64, alpha: f64, n: u64) -> Result<BetaBound, AccuracyError> {
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(AccuracyError::Alpha(alpha));
    }
    check_n(n)?;
    let lambda = alpha / privacy_factor(epsilon)?;
    let value = 2.0 * (-2.0 * lambda * lambda * n as f64).exp();
    Ok(BetaBound {
        value,
        vacuous: value >= 1.0,
    })
}

/// Unrounded population for the requested accuracy.
pub fn n_exact(epsilon: f64, alpha: f64, beta: f64) -> Result<f64, AccuracyError> {
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(AccuracyError::Alpha(alpha));
    }
    check_beta(beta)?;
    let factor = privacy_factor(epsilon)?;
    Ok(factor * factor * (2.0 / beta).ln() / (2.0 * alpha * alpha))
}

/// Smallest integer population meeting the requested accuracy.
pub fn n_from(epsilon: f64, alpha: f64, beta: f64) -> Result<u64, AccuracyError> {
    Ok(n_exact(epsilon, alpha, beta)?.ceil().max(1.0) as u64)
}

/// `ε = ln((α/λ + 1) / (α/λ − 1))`.
pub fn epsilon_from(alpha: f64, lambda: f64) -> Result<f64, AccuracyError> {
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(AccuracyError::Alpha(alpha));
    }
    let q = alpha / lambda;
    if q.is_nan() || q <= 1.0 || !q.is_finite() {
        return Err(AccuracyError::NoFiniteEpsilon(q));
    }
    Ok(((q + 1.0) / (q - 1.0)).ln())
}

/// Lower bound `1 − 2·exp(−2α²n)` on Pr[error ≤ α], clamped at 0.
pub fn chernoff_confidence(alpha: f64, n: u64) -> Result<f64, AccuracyError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(AccuracyError::Alpha(alpha));
    }
    check_n(n)?;
    Ok((1.0 - 2.0 * (-2.0 * alpha * alpha * n as f64).exp()).max(0.0))
}

/// A fully populated `(α, β, n, λ, ε)` tuple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AccuracyParams {
    pub alpha: f64,
    pub beta: f64,
    pub n: u64,
    pub epsilon: f64,
    pub lambda: f64,
}

/// Two of the three Chernoff parameters; the third is solved for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Given {
    BetaN { beta: f64, n: u64 },
    AlphaBeta { alpha: f64, beta: f64 },
    AlphaN { alpha: f64, n: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Solved {
    pub params: AccuracyParams,
    pub vacuous: bool,
}

impl Given {
    /// Builds from optional fields; exactly two must be present.
    pub fn from_parts(alpha: Option<f64>, beta: Option<f64>, n: Option<u64>) -> Option<Given> {
        match (alpha, beta, n) {
            (None, Some(beta), Some(n)) => Some(Given::BetaN { beta, n }),
            (Some(alpha), Some(beta), None) => Some(Given::AlphaBeta { alpha, beta }),
            (Some(alpha), None, Some(n)) => Some(Given::AlphaN { alpha, n }),
            _ => None,
        }
    }

    pub fn solve(self, epsilon: f64) -> Result<Solved, AccuracyError> {
        let (alpha, beta, n, vacuous) = match self {
            Given::BetaN { beta, n } => (alpha_from(epsilon, beta, n)?, beta, n, false),
            Given::AlphaBeta { alpha, beta } => (alpha, beta, n_from(epsilon, alpha, beta)?, false),
            Given::AlphaN { alpha, n } => {
                let b = beta_from(epsilon, alpha, n)?;
                (alpha, b.value, n, b.vacuous)
            }
        };
        let lambda = if beta > 0.0 && beta < 1.0 {
            lambda_of(beta, n)?
        } else {
            f64::NAN
        };
        Ok(Solved {
            params: AccuracyParams {
                alpha,
                beta,
                n,
                epsilon,
                lambda,
            },
            vacuous,
        })
    }
}
