//! Seeded population simulator for randomized-response polls.
//!
//! Every simulated respondent runs a complete client session (fetch, gate,
//! prepopulate, answer, finalize at the deadline) against a loopback
//! transport under a logical clock. Submissions are parsed with the same
//! protocol code the server uses and aggregated into the server's report.
//!
//! * [`spec`]: the simulation input document.
//! * [`exec`]: seeding and the parallel/sequential executor.
//! * [`run`]: [`simulate`](run::simulate) and its report.
//! * [`checks`]: empirical DP ratio test and the accuracy backtest.
//! * [`golden`]: reference vectors for alternative engine implementations.

pub mod checks;
pub mod exec;
pub mod golden;
pub mod run;
pub mod spec;

pub use checks::{accuracy_backtest, dp_ratio_test, sample_mechanism, Backtest, DpTest, EmpiricalMatrix, Verdict};
pub use exec::{respondent_seed, Execution};
pub use run::{simulate, SimulationReport};
pub use spec::{SimulationSpec, SpecError};
