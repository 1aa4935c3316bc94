//! Empirical checks of the privacy and accuracy guarantees.

use std::collections::BTreeMap;

use rrpoll_core::mechanism::{self, TransitionMatrix};
use rrpoll_core::poll::Poll;
use serde::Serialize;

use crate::exec::{self, Execution};
use crate::run::{self, SimulationError};
use crate::spec::SimulationSpec;

/// Relative slack on `e^ε` for empirical ratios. At 10^5 samples per row the
/// binomial error of a cell near 1/6 is about 0.7%, so 5% leaves a wide
/// margin on both cells of the ratio.
pub const DP_TOLERANCE: f64 = 0.05;
/// Fewer samples per input row than this give an inconclusive verdict.
pub const MIN_DP_SAMPLES: u64 = 100_000;

const CHUNK: u64 = 1 << 16;

/// Observed output counts, `counts[input][output]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EmpiricalMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl EmpiricalMatrix {
    pub fn zeros(k: usize) -> Self {
        EmpiricalMatrix {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn record(&mut self, input: usize, output: usize) {
        self.counts[input][output] += 1;
    }

    pub fn row_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|row| row.iter().sum()).collect()
    }

    pub fn min_row_samples(&self) -> u64 {
        self.row_totals().into_iter().min().unwrap_or(0)
    }

    /// Row-normalized frequencies; unsampled rows are all zero.
    pub fn frequencies(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                    .collect()
            })
            .collect()
    }

    /// Per output column, the largest over the smallest frequency across
    /// sampled rows. `None` when a sampled row never produced the column
    /// while another did (an unbounded ratio).
    pub fn column_ratios(&self) -> Vec<Option<f64>> {
        let totals = self.row_totals();
        let freqs = self.frequencies();
        let k = self.counts.len();
        (0..k)
            .map(|b| {
                let column: Vec<f64> = (0..k).filter(|&a| totals[a] > 0).map(|a| freqs[a][b]).collect();
                let max = column.iter().cloned().fold(0.0, f64::max);
                let min = column.iter().cloned().fold(f64::INFINITY, f64::min);
                if column.len() < 2 || max == 0.0 {
                    Some(1.0)
                } else if min == 0.0 {
                    None
                } else {
                    Some(max / min)
                }
            })
            .collect()
    }

    pub fn max_ratio(&self) -> Option<f64> {
        self.column_ratios()
            .into_iter()
            .try_fold(1.0f64, |acc, r| r.map(|r| acc.max(r)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnCheck {
    pub column: usize,
    pub ratio: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DpTest {
    pub verdict: Verdict,
    pub epsilon: f64,
    /// `e^ε · (1 + tolerance)`.
    pub bound: f64,
    pub tolerance: f64,
    pub min_samples_per_row: u64,
    pub columns: Vec<ColumnCheck>,
}

/// Checks every empirical column ratio against `e^ε · (1 + tolerance)`.
pub fn dp_ratio_test(empirical: &EmpiricalMatrix, epsilon: f64, tolerance: f64) -> DpTest {
    let bound = epsilon.exp() * (1.0 + tolerance);
    let columns: Vec<ColumnCheck> = empirical
        .column_ratios()
        .into_iter()
        .enumerate()
        .map(|(column, ratio)| ColumnCheck {
            column,
            ratio,
            pass: ratio.is_some_and(|r| r <= bound),
        })
        .collect();
    let min_samples_per_row = empirical.min_row_samples();
    let verdict = if min_samples_per_row < MIN_DP_SAMPLES {
        Verdict::Inconclusive
    } else if columns.iter().all(|c| c.pass) {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    DpTest {
        verdict,
        epsilon,
        bound,
        tolerance,
        min_samples_per_row,
        columns,
    }
}

/// Pushes `samples_per_row` inputs of every leaf straight through the
/// mechanism. Work is split into fixed chunks seeded by chunk index, so the
/// result does not depend on `exec`.
pub fn sample_mechanism(m: &TransitionMatrix, samples_per_row: u64, seed: u64, exec: Execution) -> EmpiricalMatrix {
    let k = m.len();
    let chunks_per_row = samples_per_row.div_ceil(CHUNK);
    let partial = exec.map(k as u64 * chunks_per_row, |unit| {
        let row = (unit / chunks_per_row) as usize;
        let chunk = unit % chunks_per_row;
        let draws = CHUNK.min(samples_per_row - chunk * CHUNK);
        let (mut rng, _) = exec::streams(exec::respondent_seed(seed, unit));
        let mut counts = vec![0u64; k];
        for _ in 0..draws {
            counts[mechanism::randomize(row, m, &mut rng)] += 1;
        }
        (row, counts)
    });
    let mut empirical = EmpiricalMatrix::zeros(k);
    for (row, counts) in partial {
        for (b, c) in counts.into_iter().enumerate() {
            empirical.counts[row][b] += c;
        }
    }
    empirical
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Backtest {
    pub trials: u64,
    pub n: u64,
    pub beta: f64,
    /// Trials whose every leaf estimate fell within its subtree's α.
    pub covered: u64,
    pub coverage: f64,
    /// α per subtree, for `n` responses.
    pub alpha: Vec<Option<f64>>,
    /// Largest leaf error of each trial, over all subtrees.
    pub max_errors: Vec<f64>,
}

/// Repeats a full simulation of `n` respondents who all answer, and counts
/// how often the α bound held for every leaf.
pub fn accuracy_backtest(
    poll: &Poll,
    distributions: &BTreeMap<String, BTreeMap<String, String>>,
    n: u64,
    trials: u64,
    seed: u64,
    exec: Execution,
) -> Result<Backtest, SimulationError> {
    let mut covered = 0;
    let mut max_errors = Vec::with_capacity(trials as usize);
    let mut alpha = Vec::new();
    let mut beta = 0.0;
    for trial in 0..trials {
        let trial_seed = u64::from_le_bytes(exec::respondent_seed(seed, trial)[..8].try_into().expect("8 bytes"));
        let spec = SimulationSpec::answering_all(n, trial_seed, distributions.clone());
        let report = run::simulate(poll, &spec, exec)?;
        alpha = report.subtrees.iter().map(|s| s.alpha).collect();
        beta = report.header.beta;
        if report.subtrees.iter().all(|s| s.within_alpha == Some(true)) {
            covered += 1;
        }
        max_errors.push(report.subtrees.iter().map(|s| s.max_error).fold(0.0, f64::max));
    }
    Ok(Backtest {
        trials,
        n,
        beta,
        covered,
        coverage: if trials == 0 { 0.0 } else { covered as f64 / trials as f64 },
        alpha,
        max_errors,
    })
}
