use std::collections::BTreeSet;
use std::sync::Arc;

use rand_core::RngCore;
use rrpoll_core::aggregator::{self, AggregatorError};
use rrpoll_core::mechanism::{BudgetState, EpsilonValue};
use rrpoll_core::poll::{serialize_poll, Poll};
use rrpoll_core::protocol::{parse_submission, ResponseRecord, SubmissionError};
use rrpoll_core::rational::{self, format_rational, Exact};
use rrpoll_core::respondent::{
    observable_trace, LogicalClock, LoopbackTransport, MessageKind, PreparedPoll, RecordingTransport, Session,
    SessionError, SessionState, TraceSummary, Transport,
};
use serde::Serialize;

use crate::checks::{self, DpTest, EmpiricalMatrix, DP_TOLERANCE, MIN_DP_SAMPLES};
use crate::exec::{self, Execution};
use crate::spec::{Answering, Resolved, SimulationSpec, SpecError, Timing};

const SEED_DERIVATION: &str = "sha256(le64(seed) || le64(index)), ChaCha20 stream 0 for the session, stream 1 for the persona";
const MAX_LISTED_VIOLATIONS: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum SimulationError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("respondent {index}: submission rejected: {source}")]
    Protocol { index: u64, source: SubmissionError },
    #[error(transparent)]
    Aggregator(#[from] AggregatorError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportHeader {
    pub population: u64,
    pub seed: u64,
    pub beta: f64,
    pub seed_derivation: &'static str,
    pub dp_tolerance: f64,
    pub min_dp_samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub header: ReportHeader,
    pub admitted: u64,
    pub refused: u64,
    pub epsilon: Option<EpsilonValue>,
    pub subtrees: Vec<SubtreeSimulation>,
    pub trace: TraceAudit,
    /// Submissions the aggregator could not count.
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubtreeSimulation {
    pub id: String,
    pub labels: Vec<String>,
    pub epsilon: EpsilonValue,
    /// Distribution of true answers.
    pub truth: Vec<Exact>,
    /// Distribution of mechanism inputs, stand-ins included. This is what
    /// the estimator targets.
    pub reference: Vec<Exact>,
    pub counts: Vec<u64>,
    pub raw: Option<Vec<Exact>>,
    /// Clamped estimates as fractions of the responses.
    pub estimates: Option<Vec<f64>>,
    pub errors: Vec<f64>,
    pub max_error: f64,
    pub mean_error: f64,
    pub alpha: Option<f64>,
    pub within_alpha: Option<bool>,
    pub empirical: EmpiricalMatrix,
    pub empirical_frequencies: Vec<Vec<f64>>,
    pub empirical_max_ratio: Option<f64>,
    pub exact_max_ratio: f64,
    pub dp: DpTest,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceAudit {
    pub sessions: u64,
    /// Admitted sessions that sent exactly a poll request then a submission.
    pub two_messages: u64,
    pub full_key_sets: u64,
    pub emitted_at_deadline: u64,
    /// Refused sessions that sent nothing after the poll request.
    pub refused_silent: u64,
    pub violations: Vec<String>,
    pub passed: bool,
}

struct Context {
    prepared: Arc<PreparedPoll>,
    document: String,
    resolved: Resolved,
    budget: BudgetState,
    seed: u64,
}

struct Outcome {
    admitted: bool,
    inputs: Vec<usize>,
    submission: Option<String>,
    trace: TraceSummary,
}

fn run_respondent(ctx: &Context, index: u64) -> Result<Outcome, SessionError> {
    let (mut rng, mut persona) = exec::streams(exec::respondent_seed(ctx.seed, index));
    let clock = LogicalClock::new(0);
    let mut transport = RecordingTransport::new(LoopbackTransport::new(ctx.document.as_str()), clock.clone());
    let fetched = transport.fetch_poll()?;
    debug_assert_eq!(fetched, ctx.document);
    let mut session = Session::begin(ctx.prepared.clone(), ctx.budget.clone(), &mut rng, clock.clone());

    let answering = [Answering::None, Answering::Some, Answering::All][ctx.resolved.behavior_sampler.sample(&mut persona)];
    let timing = [Timing::Fast, Timing::Slow][ctx.resolved.timing_sampler.sample(&mut persona)];
    let truths: Vec<usize> = ctx.resolved.truth_samplers.iter().map(|s| s.sample(&mut persona)).collect();
    let answered: Vec<bool> = truths
        .iter()
        .map(|_| match answering {
            Answering::None => false,
            Answering::All => true,
            Answering::Some => persona.next_u32() & 1 == 1,
        })
        .collect();

    let mut inputs = Vec::new();
    let admitted = session.state() == SessionState::Open;
    if admitted {
        let deadline = session.deadline_ms();
        clock.set(match timing {
            Timing::Fast => session.started_at_ms(),
            Timing::Slow => deadline - 1,
        });
        for (subtree, (&leaf, &answer)) in truths.iter().zip(&answered).enumerate() {
            if answer {
                session.record_leaf(subtree, leaf)?;
            }
        }
        // nothing may leave before the deadline
        session.tick(&mut rng, &mut transport)?;
        inputs = session.inputs();
        clock.set(deadline);
        session.tick(&mut rng, &mut transport)?;
    }
    Ok(Outcome {
        admitted,
        inputs,
        submission: transport.inner.submissions.pop(),
        trace: observable_trace(transport.messages()),
    })
}

/// Runs `spec.population` full respondent sessions against `poll` and
/// aggregates what reached the (loopback) server. Deterministic in the spec;
/// `exec` only changes scheduling.
pub fn simulate(poll: &Poll, spec: &SimulationSpec, exec: Execution) -> Result<SimulationReport, SimulationError> {
    let resolved = spec.resolve(poll)?;
    let prepared = Arc::new(PreparedPoll::new(poll.clone())?);
    let ctx = Context {
        document: serialize_poll(poll),
        budget: spec.budget.map(BudgetState::new).unwrap_or_else(|| BudgetState::from_poll(poll)),
        prepared: prepared.clone(),
        resolved,
        seed: spec.seed,
    };
    let outcomes = exec
        .map(spec.population, |i| run_respondent(&ctx, i))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

    let ids: BTreeSet<String> = poll.subtree_ids().map(str::to_owned).collect();
    let trace = audit(&outcomes, &ids, poll.timeout_ms);

    let header = ReportHeader {
        population: spec.population,
        seed: spec.seed,
        beta: spec.beta,
        seed_derivation: SEED_DERIVATION,
        dp_tolerance: DP_TOLERANCE,
        min_dp_samples: MIN_DP_SAMPLES,
    };
    let admitted = outcomes.iter().filter(|o| o.admitted).count() as u64;
    let refused = spec.population - admitted;
    let Some(matrices) = prepared.matrices() else {
        return Ok(SimulationReport {
            header,
            admitted,
            refused,
            epsilon: None,
            subtrees: Vec::new(),
            trace,
            rejected: 0,
        });
    };

    let mut empirical: Vec<EmpiricalMatrix> = matrices.iter().map(|m| EmpiricalMatrix::zeros(m.len())).collect();
    let mut records = Vec::with_capacity(admitted as usize);
    for (index, outcome) in outcomes.iter().enumerate() {
        let Some(body) = &outcome.submission else { continue };
        let doc = parse_submission(body.as_bytes(), &prepared.index).map_err(|source| SimulationError::Protocol {
            index: index as u64,
            source,
        })?;
        for (s, m) in matrices.iter().enumerate() {
            let output = prepared
                .index
                .leaf(m.subtree(), &doc.responses[m.subtree()])
                .expect("checked by parse_submission");
            empirical[s].record(outcome.inputs[s], output);
        }
        records.push(ResponseRecord {
            respondent_tag: format!("r{index}"),
            received_at: poll.timeout_ms,
            responses: doc.responses,
        });
    }

    let report = aggregator::report_with(matrices, &records, spec.beta)?;
    let references = ctx.resolved.input_distribution();
    let subtrees = report
        .subtrees
        .into_iter()
        .zip(empirical)
        .zip(references)
        .zip(&ctx.resolved.truth)
        .map(|(((sub, empirical), reference), truth)| {
            let total: u64 = sub.counts.iter().sum();
            let estimates = sub
                .estimates
                .as_ref()
                .map(|e| e.clamped.iter().map(|c| c / total as f64).collect::<Vec<_>>());
            let errors: Vec<f64> = match &estimates {
                Some(est) => est.iter().zip(&reference).map(|(e, r)| (e - rational::to_f64(r)).abs()).collect(),
                None => Vec::new(),
            };
            let max_error = errors.iter().cloned().fold(0.0, f64::max);
            let mean_error = if errors.is_empty() { 0.0 } else { errors.iter().sum::<f64>() / errors.len() as f64 };
            let alpha = sub.estimates.as_ref().and_then(|e| e.accuracy.first()).and_then(|a| a.alpha);
            let exact_max_ratio = sub.epsilon.value.exp();
            SubtreeSimulation {
                dp: checks::dp_ratio_test(&empirical, sub.epsilon.value, DP_TOLERANCE),
                id: sub.id,
                labels: sub.labels,
                truth: truth.iter().cloned().map(Exact).collect(),
                reference: reference.into_iter().map(Exact).collect(),
                counts: sub.counts,
                raw: sub.estimates.as_ref().map(|e| e.raw.clone()),
                within_alpha: alpha.filter(|_| estimates.is_some()).map(|a| max_error <= a),
                estimates,
                errors,
                max_error,
                mean_error,
                alpha,
                empirical_frequencies: empirical.frequencies(),
                empirical_max_ratio: empirical.max_ratio(),
                empirical,
                exact_max_ratio,
                epsilon: sub.epsilon,
            }
        })
        .collect();

    Ok(SimulationReport {
        header,
        admitted,
        refused,
        epsilon: Some(report.poll_epsilon),
        subtrees,
        trace,
        rejected: report.rejected.len(),
    })
}

fn audit(outcomes: &[Outcome], ids: &BTreeSet<String>, timeout_ms: u64) -> TraceAudit {
    let mut a = TraceAudit {
        sessions: outcomes.len() as u64,
        two_messages: 0,
        full_key_sets: 0,
        emitted_at_deadline: 0,
        refused_silent: 0,
        violations: Vec::new(),
        passed: true,
    };
    let violate = |a: &mut TraceAudit, index: usize, what: &str| {
        a.passed = false;
        if a.violations.len() < MAX_LISTED_VIOLATIONS {
            a.violations.push(format!("respondent {index}: {what}"));
        }
    };
    for (index, o) in outcomes.iter().enumerate() {
        let t = &o.trace;
        if !o.admitted {
            if t.message_kinds == [MessageKind::PollRequest] {
                a.refused_silent += 1;
            } else {
                violate(&mut a, index, "refused session sent a submission");
            }
            continue;
        }
        if t.message_kinds == [MessageKind::PollRequest, MessageKind::Submission] {
            a.two_messages += 1;
        } else {
            violate(&mut a, index, &format!("sent {} messages", t.messages_sent));
        }
        if t.payload_keys.get(1) == Some(ids) {
            a.full_key_sets += 1;
        } else {
            violate(&mut a, index, "submission keys differ from the poll's subtrees");
        }
        if t.emission_offset_ms == Some(timeout_ms) {
            a.emitted_at_deadline += 1;
        } else {
            violate(&mut a, index, &format!("emitted at offset {:?}", t.emission_offset_ms));
        }
    }
    a
}

impl SimulationReport {
    /// Plain-text summary table.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let eps = match &self.epsilon {
            Some(e) => format!(
                "{:.6}{}",
                e.value,
                e.exact_ratio.as_ref().map(|r| format!(" (ln {})", format_rational(r))).unwrap_or_default()
            ),
            None => "n/a".into(),
        };
        out.push_str(&format!(
            "population {}  admitted {}  refused {}  epsilon {}\n",
            self.header.population, self.admitted, self.refused, eps
        ));
        out.push_str(&format!(
            "trace audit: {}  ({} two-message, {} full-key, {} on deadline)\n",
            if self.trace.passed { "pass" } else { "FAIL" },
            self.trace.two_messages,
            self.trace.full_key_sets,
            self.trace.emitted_at_deadline
        ));
        for s in &self.subtrees {
            out.push_str(&format!(
                "\n[{}] e^eps {:.4}  empirical {}  dp {:?}  alpha {}  max error {:.4}{}\n",
                s.id,
                s.exact_max_ratio,
                s.empirical_max_ratio.map(|r| format!("{r:.4}")).unwrap_or_else(|| "unbounded".into()),
                s.dp.verdict,
                s.alpha.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into()),
                s.max_error,
                match s.within_alpha {
                    Some(true) => "  (within alpha)",
                    Some(false) => "  (OUTSIDE alpha)",
                    None => "",
                }
            ));
            out.push_str(&format!("  {:<36} {:>10} {:>10} {:>10}\n", "leaf", "reference", "estimate", "count"));
            for (i, label) in s.labels.iter().enumerate() {
                out.push_str(&format!(
                    "  {:<36} {:>10.4} {:>10} {:>10}\n",
                    label,
                    rational::to_f64(&s.reference[i].0),
                    s.estimates.as_ref().map(|e| format!("{:.4}", e[i])).unwrap_or_else(|| "-".into()),
                    s.counts[i]
                ));
            }
        }
        out
    }
}
