//! Response tallies, randomized-response noise removal, Bayes posteriors
//! and the analyst-facing estimate report.
//!
//! Counts are denoised with the matrix-inversion frequency estimator: the
//! expected observed counts are `Mᵀ·x` for true counts `x`, so the
//! estimate solves that system exactly over the rationals. Posteriors
//! `P(true = a | observed = b)` apply Bayes' theorem with the clamped
//! estimates as prior.

use num_bigint::BigInt;
use num_traits::Zero;
use serde::Serialize;

use crate::accuracy;
use crate::mechanism::{self, EpsilonValue, MechanismError, TransitionMatrix};
use crate::poll::Poll;
use crate::protocol::ResponseRecord;
use crate::rational::{self, Exact, Rational};

pub const DEFAULT_REPORTING_BETA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AggregatorError {
    #[error("transition matrix is singular")]
    Singular,
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("prior must be a probability distribution")]
    Prior,
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditEntry {
    pub respondent_tag: String,
    pub subtree: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Tally {
    pub counts: Vec<u64>,
    pub rejected: Vec<AuditEntry>,
}

/// Counts per leaf of `m`'s subtree in canonical leaf order.
pub fn tally(records: &[ResponseRecord], m: &TransitionMatrix) -> Tally {
    let mut tally = Tally {
        counts: vec![0; m.len()],
        rejected: Vec::new(),
    };
    for record in records {
        let leaf = record
            .responses
            .get(m.subtree())
            .and_then(|path| m.leaves().iter().position(|l| &l.path == path));
        match leaf {
            Some(i) => tally.counts[i] += 1,
            None => tally.rejected.push(AuditEntry {
                respondent_tag: record.respondent_tag.clone(),
                subtree: m.subtree().to_owned(),
                reason: match record.responses.get(m.subtree()) {
                    Some(path) => format!("unknown leaf path `{}`", path.join("/")),
                    None => "missing subtree".to_owned(),
                },
            }),
        }
    }
    tally
}

/// Solves `Mᵀ·x = counts` exactly.
pub fn denoise(counts: &[u64], m: &TransitionMatrix) -> Result<Vec<Rational>, AggregatorError> {
    let n = m.len();
    if counts.len() != n {
        return Err(AggregatorError::Dimension {
            expected: n,
            got: counts.len(),
        });
    }
    // augmented [Mᵀ | counts]
    let mut rows: Vec<Vec<Rational>> = (0..n)
        .map(|b| {
            let mut row: Vec<Rational> = (0..n).map(|a| m.entry(a, b).clone()).collect();
            row.push(Rational::from_integer(BigInt::from(counts[b])));
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .find(|&r| !rows[r][col].is_zero())
            .ok_or(AggregatorError::Singular)?;
        rows.swap(col, pivot);
        let p = rows[col][col].clone();
        for v in rows[col].iter_mut() {
            *v /= &p;
        }
        let pivot_row = rows[col].clone();
        for (r, row) in rows.iter_mut().enumerate() {
            if r == col || row[col].is_zero() {
                continue;
            }
            let factor = row[col].clone();
            for (v, pv) in row.iter_mut().zip(&pivot_row) {
                *v -= &factor * pv;
            }
        }
    }
    Ok(rows.into_iter().map(|mut row| row.pop().unwrap()).collect())
}

/// Zeroes negative estimates and rescales the rest to sum to `total`.
/// When nothing positive remains the mass is spread uniformly.
pub fn clamp_renormalize(raw: &[f64], total: u64) -> Vec<f64> {
    let total = total as f64;
    let clamped: Vec<f64> = raw.iter().map(|&x| x.max(0.0)).collect();
    let sum: f64 = clamped.iter().sum();
    if sum > 0.0 {
        clamped.iter().map(|x| x * total / sum).collect()
    } else {
        vec![total / raw.len() as f64; raw.len()]
    }
}

/// `P(true = a | observed)` for every `a`.
pub fn posterior(m: &TransitionMatrix, prior: &[f64], observed: usize) -> Result<Vec<f64>, AggregatorError> {
    if prior.len() != m.len() {
        return Err(AggregatorError::Dimension {
            expected: m.len(),
            got: prior.len(),
        });
    }
    let sum: f64 = prior.iter().sum();
    if prior.iter().any(|p| p.is_nan() || *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(AggregatorError::Prior);
    }
    let joint: Vec<f64> = prior
        .iter()
        .enumerate()
        .map(|(a, p)| rational::to_f64(m.entry(a, observed)) * p)
        .collect();
    let evidence: f64 = joint.iter().sum();
    Ok(joint.into_iter().map(|j| j / evidence).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeafAccuracy {
    pub alpha: Option<f64>,
    pub beta: f64,
    pub n: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimates {
    /// Exact solution of the inversion estimator; may be negative.
    pub raw: Vec<Exact>,
    pub raw_approx: Vec<f64>,
    pub clamped: Vec<f64>,
    /// `posterior[b][a] = P(true = a | observed = b)`.
    pub posterior: Vec<Vec<f64>>,
    pub accuracy: Vec<LeafAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubtreeReport {
    pub id: String,
    pub labels: Vec<String>,
    pub paths: Vec<Vec<String>>,
    pub epsilon: EpsilonValue,
    pub truth: Vec<Exact>,
    pub random: Vec<Exact>,
    pub error_rate: Vec<Exact>,
    pub counts: Vec<u64>,
    pub estimates: Option<Estimates>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub responses: u64,
    pub beta: f64,
    pub poll_epsilon: EpsilonValue,
    pub subtrees: Vec<SubtreeReport>,
    pub rejected: Vec<AuditEntry>,
}

pub fn results_report(poll: &Poll, records: &[ResponseRecord], beta: f64) -> Result<EstimateReport, AggregatorError> {
    let matrices = mechanism::build_matrices(poll)?;
    report_with(&matrices, records, beta)
}

/// Report over prebuilt matrices of a poll's subtrees.
pub fn report_with(
    matrices: &[TransitionMatrix],
    records: &[ResponseRecord],
    beta: f64,
) -> Result<EstimateReport, AggregatorError> {
    let mut subtrees = Vec::with_capacity(matrices.len());
    let mut rejected = Vec::new();
    let mut poll_epsilon = EpsilonValue::zero();
    for m in matrices {
        let epsilon = mechanism::epsilon_of_matrix(m)?;
        poll_epsilon = poll_epsilon + epsilon.clone();
        let t = tally(records, m);
        rejected.extend(t.rejected);
        let total: u64 = t.counts.iter().sum();
        let estimates = if total > 0 {
            Some(estimate(m, &t.counts, total, epsilon.value, beta)?)
        } else {
            None
        };
        subtrees.push(SubtreeReport {
            id: m.subtree().to_owned(),
            labels: m.leaves().iter().map(|l| l.label.clone()).collect(),
            paths: m.leaves().iter().map(|l| l.path.clone()).collect(),
            epsilon,
            truth: m.masses().iter().map(|x| x.t.clone().into()).collect(),
            random: m.masses().iter().map(|x| x.r.clone().into()).collect(),
            error_rate: (0..m.len()).map(|a| mechanism::error_rate(m, a).into()).collect(),
            counts: t.counts,
            estimates,
        });
    }
    Ok(EstimateReport {
        responses: records.len() as u64,
        beta,
        poll_epsilon,
        subtrees,
        rejected,
    })
}

fn estimate(m: &TransitionMatrix, counts: &[u64], total: u64, epsilon: f64, beta: f64) -> Result<Estimates, AggregatorError> {
    let raw = denoise(counts, m)?;
    let raw_approx: Vec<f64> = raw.iter().map(rational::to_f64).collect();
    let clamped = clamp_renormalize(&raw_approx, total);
    let prior: Vec<f64> = clamped.iter().map(|c| c / total as f64).collect();
    let posterior = (0..m.len())
        .map(|b| posterior(m, &prior, b))
        .collect::<Result<_, _>>()?;
    let alpha = accuracy::alpha_from(epsilon, beta, total).ok();
    let accuracy = (0..m.len())
        .map(|_| LeafAccuracy { alpha, beta, n: total })
        .collect();
    Ok(Estimates {
        raw: raw.into_iter().map(Exact).collect(),
        raw_approx,
        clamped,
        posterior,
        accuracy,
    })
}

/// Largest absolute deviation of normalized estimates from a reference
/// distribution.
pub fn max_abs_error(clamped: &[f64], total: u64, truth: &[f64]) -> f64 {
    clamped
        .iter()
        .zip(truth)
        .map(|(c, t)| (c / total as f64 - t).abs())
        .fold(0.0, f64::max)
}
