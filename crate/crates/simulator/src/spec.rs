//! Simulation input document.
//!
//! ```json
//! {
//!   "population": 1000,
//!   "seed": 7,
//!   "distributions": { "Q1": { "Happy": "1/2", "Unhappy/Damaged": "1/2" } },
//!   "behavior": { "none": "1/4", "some": "1/4", "all": "1/2" },
//!   "timing": { "fast": "1/2", "slow": "1/2" }
//! }
//! ```
//!
//! Leaves are named by their id path (`"Unhappy/Damaged"`) or by their label.
//! Subtrees without a distribution are answered uniformly; unlisted leaves
//! get probability 0. Every distribution and both mixes must sum to 1.

use std::collections::BTreeMap;

use rrpoll_core::poll::{flatten, Poll};
use rrpoll_core::rational::{self, format_rational, parse_rational, Rational};
use rrpoll_core::sampling::ExactSampler;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub population: u64,
    #[serde(default)]
    pub seed: u64,
    /// Failure probability for the α annotations in the report.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Per-session privacy budget; the poll's own budget when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
    #[serde(default)]
    pub distributions: BTreeMap<String, BTreeMap<String, String>>,
    #[serde(default)]
    pub behavior: BehaviorMix,
    #[serde(default)]
    pub timing: TimingMix,
}

fn default_beta() -> f64 {
    0.05
}

/// Fractions of respondents answering no, some, or all questions.
/// "Some" answers each question independently with probability 1/2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorMix {
    #[serde(default = "zero")]
    pub none: String,
    #[serde(default = "zero")]
    pub some: String,
    #[serde(default = "zero")]
    pub all: String,
}

impl Default for BehaviorMix {
    fn default() -> Self {
        BehaviorMix {
            none: zero(),
            some: zero(),
            all: "1/1".into(),
        }
    }
}

/// Fractions answering right after the poll opens or just before the
/// deadline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingMix {
    #[serde(default = "zero")]
    pub fast: String,
    #[serde(default = "zero")]
    pub slow: String,
}

impl Default for TimingMix {
    fn default() -> Self {
        TimingMix {
            fast: "1/1".into(),
            slow: zero(),
        }
    }
}

fn zero() -> String {
    "0/1".into()
}

#[derive(Debug, thiserror::Error)]
pub enum SpecError {
    #[error("spec: {0}")]
    Format(#[from] serde_json::Error),
    #[error("{field}: {message}")]
    Rational { field: String, message: String },
    #[error("{field} sums to {sum}, not 1")]
    NotNormalized { field: String, sum: String },
    #[error("distribution for unknown subtree {0:?}")]
    UnknownSubtree(String),
    #[error("subtree {subtree:?} has no leaf {leaf:?}")]
    UnknownLeaf { subtree: String, leaf: String },
    #[error("beta must lie in (0, 1), got {0}")]
    Beta(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Answering {
    None,
    Some,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Timing {
    Fast,
    Slow,
}

/// A spec checked against a poll, with exact samplers ready.
#[derive(Debug, Clone)]
pub struct Resolved {
    /// Per subtree, probability of each flattened leaf.
    pub truth: Vec<Vec<Rational>>,
    pub truth_samplers: Vec<ExactSampler>,
    pub behavior: [Rational; 3],
    pub behavior_sampler: ExactSampler,
    pub timing: [Rational; 2],
    pub timing_sampler: ExactSampler,
}

impl Resolved {
    /// Probability that a given question carries a real answer rather than
    /// the uniform stand-in.
    pub fn answer_probability(&self) -> Rational {
        &self.behavior[1] * rational::ratio(1, 2) + &self.behavior[2]
    }

    /// Distribution of the mechanism's input per subtree: real answers mixed
    /// with uniform stand-ins for unanswered questions.
    pub fn input_distribution(&self) -> Vec<Vec<Rational>> {
        let p = self.answer_probability();
        let q = rational::one() - &p;
        self.truth
            .iter()
            .map(|dist| {
                let uniform = Rational::new(1.into(), (dist.len() as i64).into());
                dist.iter().map(|d| &p * d + &q * &uniform).collect()
            })
            .collect()
    }
}

pub fn parse_spec(text: &str) -> Result<SimulationSpec, SpecError> {
    Ok(serde_json::from_str(text)?)
}

impl SimulationSpec {
    /// Spec with `population` respondents who all answer fast, drawn from
    /// `distributions`.
    pub fn answering_all(population: u64, seed: u64, distributions: BTreeMap<String, BTreeMap<String, String>>) -> Self {
        SimulationSpec {
            population,
            seed,
            beta: default_beta(),
            budget: None,
            distributions,
            behavior: BehaviorMix::default(),
            timing: TimingMix::default(),
        }
    }

    pub fn resolve(&self, poll: &Poll) -> Result<Resolved, SpecError> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(SpecError::Beta(self.beta));
        }
        for id in self.distributions.keys() {
            if poll.subtree(id).is_none() {
                return Err(SpecError::UnknownSubtree(id.clone()));
            }
        }
        let mut truth = Vec::with_capacity(poll.questions.len());
        for question in &poll.questions {
            let leaves = flatten(question);
            let dist = match self.distributions.get(&question.id) {
                None => vec![Rational::new(1.into(), (leaves.len() as i64).into()); leaves.len()],
                Some(given) => {
                    let mut dist = vec![Rational::from_integer(0.into()); leaves.len()];
                    for (key, value) in given {
                        let field = format!("distributions.{}.{}", question.id, key);
                        let position = leaves
                            .iter()
                            .position(|l| l.path.join("/") == *key || l.label == *key)
                            .ok_or_else(|| SpecError::UnknownLeaf {
                                subtree: question.id.clone(),
                                leaf: key.clone(),
                            })?;
                        dist[position] = probability(&field, value)?;
                    }
                    dist
                }
            };
            truth.push(dist);
        }
        let truth_samplers = truth
            .iter()
            .zip(&poll.questions)
            .map(|(d, q)| sampler(&format!("distributions.{}", q.id), d))
            .collect::<Result<_, _>>()?;
        let behavior = [
            probability("behavior.none", &self.behavior.none)?,
            probability("behavior.some", &self.behavior.some)?,
            probability("behavior.all", &self.behavior.all)?,
        ];
        let timing = [
            probability("timing.fast", &self.timing.fast)?,
            probability("timing.slow", &self.timing.slow)?,
        ];
        Ok(Resolved {
            truth,
            truth_samplers,
            behavior_sampler: sampler("behavior", &behavior)?,
            behavior,
            timing_sampler: sampler("timing", &timing)?,
            timing,
        })
    }
}

fn probability(field: &str, text: &str) -> Result<Rational, SpecError> {
    let value = parse_rational(text).map_err(|e| SpecError::Rational {
        field: field.to_owned(),
        message: e.to_string(),
    })?;
    if value < Rational::from_integer(0.into()) || value > rational::one() {
        return Err(SpecError::Rational {
            field: field.to_owned(),
            message: format!("{} is not a probability", format_rational(&value)),
        });
    }
    Ok(value)
}

fn sampler(field: &str, dist: &[Rational]) -> Result<ExactSampler, SpecError> {
    ExactSampler::new(dist).map_err(|_| SpecError::NotNormalized {
        field: field.to_owned(),
        sum: format_rational(&dist.iter().sum()),
    })
}
