//! Poll data model, canonical JSON format, validation and follow-up
//! flattening.

use std::collections::HashSet;
use std::fmt;

use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::mechanism;
use crate::rational::{self, serde_exact, Exact, Rational};

pub const DEFAULT_TIMEOUT_MS: u64 = 9000;

fn default_threshold() -> Rational {
    rational::ratio(99, 100)
}

fn default_budget() -> Rational {
    rational::ratio(100, 1)
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_MS
}

/// Unknown top-level fields are ignored: a client never trusts anything the
/// server adds beyond the poll structure itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Poll {
    pub title: String,
    #[serde(with = "serde_exact")]
    pub truth_ratio: Rational,
    #[serde(with = "serde_exact", default = "default_threshold")]
    pub truth_threshold: Rational,
    #[serde(with = "serde_exact", default = "default_budget")]
    pub budget: Rational,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    pub questions: Vec<Question>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub answers: Vec<AnswerOption>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerOption {
    pub id: String,
    pub text: String,
    #[serde(with = "serde_exact")]
    pub weight: Rational,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub follow_up: Option<Box<Question>>,
}

/// One root-to-leaf path through a question subtree. The leaves of a
/// subtree form the answer domain its transition matrix is built over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatAnswer {
    pub path: Vec<String>,
    pub label: String,
    pub truth_weight: Rational,
}

#[derive(Debug, thiserror::Error)]
pub enum PollFormatError {
    #[error("invalid poll document at `{path}`: {message}")]
    Document { path: String, message: String },
}

impl Poll {
    pub fn subtree_ids(&self) -> impl Iterator<Item = &str> {
        self.questions.iter().map(|q| q.id.as_str())
    }

    pub fn subtree(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }
}

impl Question {
    pub fn leaf_index(&self, path: &[String]) -> Option<usize> {
        flatten(self).iter().position(|leaf| leaf.path == path)
    }
}

/// Parses canonical poll JSON. Rationals are read exactly; no validation
/// beyond the document shape happens here.
pub fn parse_poll(document: &str) -> Result<Poll, PollFormatError> {
    let de = &mut serde_json::Deserializer::from_str(document);
    serde_path_to_error::deserialize(de).map_err(|err| PollFormatError::Document {
        path: err.path().to_string(),
        message: err.inner().to_string(),
    })
}

/// Serializes with fields in schema order and rationals as `"num/den"`.
pub fn serialize_poll(poll: &Poll) -> String {
    serde_json::to_string_pretty(poll).expect("poll serialization is infallible")
}

/// Flattens a question tree into its leaves in depth-first document order.
pub fn flatten(question: &Question) -> Vec<FlatAnswer> {
    let mut leaves = Vec::new();
    let mut path = Vec::new();
    let mut labels = Vec::new();
    flatten_into(question, &mut path, &mut labels, &rational::one(), &mut leaves);
    leaves
}

fn flatten_into(
    question: &Question,
    path: &mut Vec<String>,
    labels: &mut Vec<String>,
    weight: &Rational,
    out: &mut Vec<FlatAnswer>,
) {
    for answer in &question.answers {
        path.push(answer.id.clone());
        labels.push(answer.text.clone());
        let w = weight * &answer.weight;
        match &answer.follow_up {
            Some(follow_up) => flatten_into(follow_up, path, labels, &w, out),
            None => out.push(FlatAnswer {
                path: path.clone(),
                label: labels.join("/"),
                truth_weight: w,
            }),
        }
        path.pop();
        labels.pop();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "code", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Violation {
    NoQuestions,
    TooFewAnswers { question: String },
    DuplicateQuestionId { question: String },
    DuplicateAnswerId { question: String, answer: String },
    WeightOutOfRange { question: String, answer: String, weight: Exact },
    TruthRatioOutOfRange { truth_ratio: Exact },
    ThresholdOutOfRange { truth_threshold: Exact },
    TruthRatioAboveThreshold { truth_ratio: Exact, truth_threshold: Exact },
    NegativeBudget { budget: Exact },
    ZeroTimeout,
    TruthOutOfRange { subtree: String, leaf: String, t: Exact },
    NoRandomMass { subtree: String, leaf: String, r: Exact },
    AboveTruthThreshold { subtree: String, leaf: String, truth_probability: Exact },
}

impl Violation {
    /// Violations a respondent's client answers with a refusal rather than
    /// an error: the poll is well formed but too revealing to take part in.
    pub fn is_gate(&self) -> bool {
        matches!(
            self,
            Violation::TruthRatioAboveThreshold { .. }
                | Violation::AboveTruthThreshold { .. }
                | Violation::NoRandomMass { .. }
        ) || matches!(self, Violation::TruthOutOfRange { t, .. } if t.0 >= rational::one())
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoQuestions => write!(f, "poll has no questions"),
            Violation::TooFewAnswers { question } => {
                write!(f, "question `{question}` has fewer than two answers")
            }
            Violation::DuplicateQuestionId { question } => {
                write!(f, "question id `{question}` is used more than once")
            }
            Violation::DuplicateAnswerId { question, answer } => {
                write!(f, "answer id `{answer}` repeats within question `{question}`")
            }
            Violation::WeightOutOfRange { question, answer, weight } => {
                write!(f, "weight {weight} of `{question}/{answer}` is outside (0,1]")
            }
            Violation::TruthRatioOutOfRange { truth_ratio } => {
                write!(f, "truth ratio {truth_ratio} is outside [0,1]")
            }
            Violation::ThresholdOutOfRange { truth_threshold } => {
                write!(f, "truth threshold {truth_threshold} is outside (0,1)")
            }
            Violation::TruthRatioAboveThreshold { truth_ratio, truth_threshold } => {
                write!(f, "truth ratio {truth_ratio} exceeds truth threshold {truth_threshold}")
            }
            Violation::NegativeBudget { budget } => write!(f, "budget {budget} is negative"),
            Violation::ZeroTimeout => write!(f, "timeout must be positive"),
            Violation::TruthOutOfRange { subtree, leaf, t } => {
                write!(f, "t = {t} for `{subtree}:{leaf}` is outside (0,1)")
            }
            Violation::NoRandomMass { subtree, leaf, r } => {
                write!(f, "r = {r} for `{subtree}:{leaf}` is not positive")
            }
            Violation::AboveTruthThreshold { subtree, leaf, truth_probability } => write!(
                f,
                "`{subtree}:{leaf}` answers truthfully with probability {truth_probability}, above the threshold"
            ),
        }
    }
}

/// Collects every violation; an empty report means the poll is usable.
pub fn validate_poll(poll: &Poll) -> Vec<Violation> {
    let mut report = Vec::new();
    let zero = Rational::zero();
    let one = Rational::one();

    if poll.questions.is_empty() {
        report.push(Violation::NoQuestions);
    }
    if poll.truth_ratio.is_negative() || poll.truth_ratio > one {
        report.push(Violation::TruthRatioOutOfRange {
            truth_ratio: poll.truth_ratio.clone().into(),
        });
    }
    if poll.truth_threshold <= zero || poll.truth_threshold >= one {
        report.push(Violation::ThresholdOutOfRange {
            truth_threshold: poll.truth_threshold.clone().into(),
        });
    }
    if poll.truth_ratio > poll.truth_threshold {
        report.push(Violation::TruthRatioAboveThreshold {
            truth_ratio: poll.truth_ratio.clone().into(),
            truth_threshold: poll.truth_threshold.clone().into(),
        });
    }
    if poll.budget.is_negative() {
        report.push(Violation::NegativeBudget {
            budget: poll.budget.clone().into(),
        });
    }
    if poll.timeout_ms == 0 {
        report.push(Violation::ZeroTimeout);
    }

    let mut seen = HashSet::new();
    for question in &poll.questions {
        check_structure(question, &mut seen, &mut report);
    }

    for question in &poll.questions {
        let leaves = flatten(question);
        if leaves.len() < 2 {
            continue;
        }
        for (leaf, mass) in leaves.iter().zip(mechanism::truth_masses(&leaves, &poll.truth_ratio)) {
            if mass.t <= zero || mass.t >= one {
                report.push(Violation::TruthOutOfRange {
                    subtree: question.id.clone(),
                    leaf: leaf.label.clone(),
                    t: mass.t.clone().into(),
                });
            }
            if mass.r <= zero {
                report.push(Violation::NoRandomMass {
                    subtree: question.id.clone(),
                    leaf: leaf.label.clone(),
                    r: mass.r.clone().into(),
                });
            }
            let p = &mass.t + &mass.r;
            if p > poll.truth_threshold {
                report.push(Violation::AboveTruthThreshold {
                    subtree: question.id.clone(),
                    leaf: leaf.label.clone(),
                    truth_probability: p.into(),
                });
            }
        }
    }
    report
}

fn check_structure<'a>(question: &'a Question, seen: &mut HashSet<&'a str>, report: &mut Vec<Violation>) {
    if !seen.insert(&question.id) {
        report.push(Violation::DuplicateQuestionId {
            question: question.id.clone(),
        });
    }
    if question.answers.len() < 2 {
        report.push(Violation::TooFewAnswers {
            question: question.id.clone(),
        });
    }
    let mut answer_ids = HashSet::new();
    for answer in &question.answers {
        if !answer_ids.insert(answer.id.as_str()) {
            report.push(Violation::DuplicateAnswerId {
                question: question.id.clone(),
                answer: answer.id.clone(),
            });
        }
        if answer.weight <= Rational::zero() || answer.weight > Rational::one() {
            report.push(Violation::WeightOutOfRange {
                question: question.id.clone(),
                answer: answer.id.clone(),
                weight: answer.weight.clone().into(),
            });
        }
        if let Some(follow_up) = &answer.follow_up {
            check_structure(follow_up, seen, report);
        }
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn answer(id: &str, weight: Rational) -> AnswerOption {
        AnswerOption {
            id: id.into(),
            text: id.into(),
            weight,
            follow_up: None,
        }
    }

    pub fn question(id: &str, answers: Vec<AnswerOption>) -> Question {
        Question {
            id: id.into(),
            text: id.into(),
            answers,
        }
    }

    pub fn poll(truth_ratio: Rational, questions: Vec<Question>) -> Poll {
        Poll {
            title: "test".into(),
            truth_ratio,
            truth_threshold: rational::ratio(99, 100),
            budget: rational::ratio(100, 1),
            timeout_ms: DEFAULT_TIMEOUT_MS,
            questions,
        }
    }

    pub fn symmetric(id: &str, k: usize) -> Question {
        question(
            id,
            (0..k).map(|i| answer(&format!("a{}", i + 1), rational::one())).collect(),
        )
    }

    /// "How do you feel about your purchase?" with a follow-up on Unhappy.
    pub fn purchase() -> Question {
        let follow_up = question(
            "F1",
            vec![
                answer("Expectations", rational::one()),
                answer("Damaged", rational::one()),
                answer("Other", rational::one()),
            ],
        );
        let mut unhappy = answer("Unhappy", rational::one());
        unhappy.follow_up = Some(Box::new(follow_up));
        question(
            "Q1",
            vec![
                answer("Happy", rational::one()),
                answer("Neutral", rational::one()),
                unhappy,
            ],
        )
    }
}
