//! Locally differentially private polls built on randomized response.
//!
//! * [`poll`]: poll model, canonical JSON and follow-up flattening
//! * [`mechanism`]: transition matrices, privacy cost, gates and sampling
//! * [`accuracy`]: Chernoff relations between alpha, beta, n and epsilon
//! * [`aggregator`]: tallies, noise removal and posteriors
//! * [`respondent`]: the trusted client session engine
//! * [`protocol`]: submission and response-log wire formats

pub mod accuracy;
pub mod aggregator;
pub mod mechanism;
pub mod poll;
pub mod protocol;
pub mod rational;
pub mod respondent;
pub mod sampling;

pub use mechanism::{BudgetState, EpsilonValue, TransitionMatrix};
pub use poll::{FlatAnswer, Poll, Question};
pub use rational::Rational;
