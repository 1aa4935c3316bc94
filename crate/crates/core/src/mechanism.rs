//! Randomized-response transition matrices, their privacy cost, the
//! respondent-side admission gates and exact sampling of responses.

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive};
use rand_core::{CryptoRng, RngCore};
use serde::Serialize;

use crate::poll::{flatten, FlatAnswer, Poll, Question};
use crate::rational::{self, Rational};
use crate::sampling::ExactSampler;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MechanismError {
    #[error("subtree `{subtree}` has {leaves} leaf answer(s); at least 2 are required")]
    TooFewLeaves { subtree: String, leaves: usize },
    #[error("t = {t} for leaf `{leaf}` of `{subtree}` is outside (0,1)")]
    InvalidTruth { subtree: String, leaf: String, t: String },
    #[error("transition matrix has a zero entry; epsilon is infinite")]
    InfiniteEpsilon,
}

/// Diagonal truth mass `t` and uniform random mass `r = (1 - t)/|A|` of
/// one leaf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruthMass {
    pub t: Rational,
    pub r: Rational,
}

impl TruthMass {
    /// Probability of emitting the true answer.
    pub fn truth_probability(&self) -> Rational {
        &self.t + &self.r
    }

    pub fn error_rate(&self) -> Rational {
        Rational::one() - self.truth_probability()
    }
}

/// `t_a` is the truth ratio times the product of weights on the leaf's path.
pub fn truth_masses(leaves: &[FlatAnswer], truth_ratio: &Rational) -> Vec<TruthMass> {
    let size = Rational::from_integer(BigInt::from(leaves.len()));
    leaves
        .iter()
        .map(|leaf| {
            let t = truth_ratio * &leaf.truth_weight;
            let r = (Rational::one() - &t) / &size;
            TruthMass { t, r }
        })
        .collect()
}

fn entries_of(masses: &[TruthMass]) -> Vec<Vec<Rational>> {
    masses
        .iter()
        .enumerate()
        .map(|(a, mass)| {
            (0..masses.len())
                .map(|b| if a == b { mass.truth_probability() } else { mass.r.clone() })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TransitionMatrix {
    subtree: String,
    leaves: Vec<FlatAnswer>,
    masses: Vec<TruthMass>,
    entries: Vec<Vec<Rational>>,
    rows: Vec<ExactSampler>,
}

impl TransitionMatrix {
    pub fn subtree(&self) -> &str {
        &self.subtree
    }

    pub fn leaves(&self) -> &[FlatAnswer] {
        &self.leaves
    }

    pub fn masses(&self) -> &[TruthMass] {
        &self.masses
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    /// `entry(a, b)` = Pr[emit `b` | true answer `a`].
    pub fn entry(&self, a: usize, b: usize) -> &Rational {
        &self.entries[a][b]
    }

    pub fn rows(&self) -> &[Vec<Rational>] {
        &self.entries
    }

    pub fn row_sampler(&self, a: usize) -> &ExactSampler {
        &self.rows[a]
    }

    /// Matrix over explicit masses, bypassing range checks. Test fixtures
    /// use this to probe limits that valid polls never reach.
    #[doc(hidden)]
    pub fn from_masses(subtree: &str, leaves: Vec<FlatAnswer>, masses: Vec<TruthMass>) -> Self {
        let entries = entries_of(&masses);
        let rows = entries
            .iter()
            .map(|row| ExactSampler::new(row).expect("rows of a matrix with t in [0,1] are distributions"))
            .collect();
        TransitionMatrix {
            subtree: subtree.to_owned(),
            leaves,
            masses,
            entries,
            rows,
        }
    }
}

pub fn build_matrix(subtree: &Question, truth_ratio: &Rational) -> Result<TransitionMatrix, MechanismError> {
    let leaves = flatten(subtree);
    if leaves.len() < 2 {
        return Err(MechanismError::TooFewLeaves {
            subtree: subtree.id.clone(),
            leaves: leaves.len(),
        });
    }
    let masses = truth_masses(&leaves, truth_ratio);
    for (leaf, mass) in leaves.iter().zip(&masses) {
        if !mass.t.is_positive() || mass.t >= Rational::one() {
            return Err(MechanismError::InvalidTruth {
                subtree: subtree.id.clone(),
                leaf: leaf.label.clone(),
                t: rational::format_rational(&mass.t),
            });
        }
    }
    Ok(TransitionMatrix::from_masses(&subtree.id, leaves, masses))
}

/// Privacy cost on the natural-log scale, with `e^ε` kept exactly where
/// it is known.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsilonValue {
    pub value: f64,
    #[serde(serialize_with = "serialize_opt_exact")]
    pub exact_ratio: Option<Rational>,
}

fn serialize_opt_exact<S: serde::Serializer>(v: &Option<Rational>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(r) => s.serialize_some(&rational::format_rational(r)),
        None => s.serialize_none(),
    }
}

impl EpsilonValue {
    pub fn from_ratio(ratio: Rational) -> Self {
        EpsilonValue {
            value: ln_rational(&ratio),
            exact_ratio: Some(ratio),
        }
    }

    pub fn zero() -> Self {
        Self::from_ratio(Rational::one())
    }
}

impl std::ops::Add for EpsilonValue {
    type Output = EpsilonValue;

    fn add(self, rhs: EpsilonValue) -> EpsilonValue {
        match (self.exact_ratio, rhs.exact_ratio) {
            (Some(a), Some(b)) => EpsilonValue::from_ratio(a * b),
            _ => EpsilonValue {
                value: self.value + rhs.value,
                exact_ratio: None,
            },
        }
    }
}

fn ln_big(n: &BigInt) -> f64 {
    let bits = n.bits();
    if bits <= 1000 {
        return n.to_f64().unwrap().ln();
    }
    let shift = bits - 64;
    (n >> shift).to_f64().unwrap().ln() + shift as f64 * std::f64::consts::LN_2
}

/// Natural log of a positive rational without overflowing `f64`.
pub fn ln_rational(value: &Rational) -> f64 {
    match value.to_f64() {
        Some(v) if v.is_finite() && v > 0.0 && v.is_normal() => v.ln(),
        _ => ln_big(value.numer()) - ln_big(value.denom()),
    }
}

/// `max(column) / min(column)` for each column, or `None` when some
/// column has a non-positive entry.
pub fn column_ratios(entries: &[Vec<Rational>]) -> Option<Vec<Rational>> {
    let n = entries.first().map_or(0, Vec::len);
    (0..n)
        .map(|c| {
            let column = entries.iter().map(|row| &row[c]);
            let max = column.clone().max()?;
            let min = column.min()?;
            min.is_positive().then(|| max / min)
        })
        .collect()
}

/// `e^ε` is the largest ratio between two entries of the same column.
pub fn epsilon_of_matrix(m: &TransitionMatrix) -> Result<EpsilonValue, MechanismError> {
    epsilon_of_entries(m.rows())
}

fn epsilon_of_entries(entries: &[Vec<Rational>]) -> Result<EpsilonValue, MechanismError> {
    let ratios = column_ratios(entries).ok_or(MechanismError::InfiniteEpsilon)?;
    let worst = ratios.into_iter().max().unwrap_or_else(Rational::one);
    Ok(EpsilonValue::from_ratio(worst))
}

pub fn build_matrices(poll: &Poll) -> Result<Vec<TransitionMatrix>, MechanismError> {
    poll.questions
        .iter()
        .map(|q| build_matrix(q, &poll.truth_ratio))
        .collect()
}

/// Per-subtree costs summed over the poll's top-level subtrees.
pub fn poll_epsilon(poll: &Poll) -> Result<EpsilonValue, MechanismError> {
    build_matrices(poll)?
        .iter()
        .map(epsilon_of_matrix)
        .try_fold(EpsilonValue::zero(), |acc, e| Ok(acc + e?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetState {
    pub capacity: f64,
    pub spent: f64,
}

impl BudgetState {
    pub fn new(capacity: f64) -> Self {
        assert!(capacity >= 0.0, "budget capacity must be nonnegative");
        BudgetState { capacity, spent: 0.0 }
    }

    pub fn from_poll(poll: &Poll) -> Self {
        Self::new(rational::to_f64(&poll.budget).max(0.0))
    }

    pub fn remaining(&self) -> f64 {
        self.capacity - self.spent
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GateReason {
    OverBudget,
    TruthThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Admission {
    pub admitted: bool,
    pub reasons: Vec<GateReason>,
    /// `None` when some leaf always answers truthfully (infinite cost).
    pub epsilon: Option<EpsilonValue>,
}

/// The poll-dependent half of the admission decision.
#[derive(Debug, Clone, PartialEq)]
pub struct GateInputs {
    /// `None` when some leaf always answers truthfully (infinite cost).
    pub epsilon: Option<EpsilonValue>,
    pub over_threshold: bool,
}

impl GateInputs {
    pub fn compute(poll: &Poll) -> Self {
        let mut epsilon = Some(EpsilonValue::zero());
        let mut over_threshold = false;
        for question in &poll.questions {
            let leaves = flatten(question);
            let masses = truth_masses(&leaves, &poll.truth_ratio);
            over_threshold |= masses
                .iter()
                .any(|m| m.truth_probability() > poll.truth_threshold);
            let cost = epsilon_of_entries(&entries_of(&masses)).ok();
            epsilon = epsilon.zip(cost).map(|(a, b)| a + b);
        }
        GateInputs { epsilon, over_threshold }
    }

    /// Admits iff the full cost fits the remaining budget and no leaf is
    /// over the truth threshold; admission debits the budget.
    pub fn decide(&self, budget: &mut BudgetState) -> Admission {
        let mut reasons = Vec::new();
        match &self.epsilon {
            Some(eps) if eps.value <= budget.remaining() => {}
            _ => reasons.push(GateReason::OverBudget),
        }
        if self.over_threshold {
            reasons.push(GateReason::TruthThreshold);
        }
        let admitted = reasons.is_empty();
        if let (true, Some(eps)) = (admitted, &self.epsilon) {
            budget.spent += eps.value;
        }
        Admission {
            admitted,
            reasons,
            epsilon: self.epsilon.clone(),
        }
    }
}

pub fn check_gates(poll: &Poll, budget: &mut BudgetState) -> Admission {
    GateInputs::compute(poll).decide(budget)
}

/// Draws the emitted leaf for `true_leaf` from its matrix row.
pub fn randomize<R: RngCore + CryptoRng + ?Sized>(true_leaf: usize, m: &TransitionMatrix, rng: &mut R) -> usize {
    m.row_sampler(true_leaf).sample(rng)
}

/// Probability that the emitted leaf differs from the true one.
pub fn error_rate(m: &TransitionMatrix, leaf: usize) -> Rational {
    m.masses[leaf].error_rate()
}
