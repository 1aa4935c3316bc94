//! Trusted respondent-side session engine.
//!
//! A session fetches the poll once, recomputes its cost locally, draws a
//! uniformly random stand-in answer for every subtree up front and then
//! only records true ("shadow") answers locally. When the deadline fires,
//! every subtree is randomized from its shadow answer or its stand-in and
//! the whole map is sent in a single submission. What an observer sees
//! (message count, payload keys, emission time) therefore depends on the
//! poll alone.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand_core::{CryptoRng, RngCore};
use serde::Serialize;

use crate::mechanism::{self, Admission, BudgetState, EpsilonValue, GateInputs, MechanismError, TransitionMatrix};
use crate::poll::{self, Poll, PollFormatError, Violation};
use crate::protocol::{LeafIndex, SubmissionDocument};
use crate::sampling::ExactSampler;

pub type Submission = SubmissionDocument;

pub trait Clock {
    fn now_ms(&self) -> u64;
}

/// Manually advanced clock shared between a test driver and its sessions.
#[derive(Debug, Clone, Default)]
pub struct LogicalClock(Arc<AtomicU64>);

impl LogicalClock {
    pub fn new(start_ms: u64) -> Self {
        LogicalClock(Arc::new(AtomicU64::new(start_ms)))
    }

    pub fn set(&self, ms: u64) {
        self.0.store(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for LogicalClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("transport failure: {0}")]
pub struct TransportError(pub String);

/// The only two messages a respondent client ever sends. Fetching the poll
/// takes no arguments, so no respondent data can ride along with it.
pub trait Transport {
    fn fetch_poll(&mut self) -> Result<String, TransportError>;
    fn submit(&mut self, body: &str) -> Result<(), TransportError>;
}

/// In-process transport serving a fixed poll document and keeping every
/// submission body.
#[derive(Debug, Clone, Default)]
pub struct LoopbackTransport {
    pub poll_document: String,
    pub submissions: Vec<String>,
}

impl LoopbackTransport {
    pub fn new(poll_document: impl Into<String>) -> Self {
        LoopbackTransport {
            poll_document: poll_document.into(),
            submissions: Vec::new(),
        }
    }
}

impl Transport for LoopbackTransport {
    fn fetch_poll(&mut self) -> Result<String, TransportError> {
        Ok(self.poll_document.clone())
    }

    fn submit(&mut self, body: &str) -> Result<(), TransportError> {
        self.submissions.push(body.to_owned());
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    PollRequest,
    Submission,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Message {
    pub kind: MessageKind,
    pub at_ms: u64,
    pub payload_keys: BTreeSet<String>,
}

/// Wraps a transport and records what a network observer could see.
#[derive(Debug, Clone)]
pub struct RecordingTransport<T, C> {
    pub inner: T,
    clock: C,
    messages: Vec<Message>,
}

impl<T: Transport, C: Clock> RecordingTransport<T, C> {
    pub fn new(inner: T, clock: C) -> Self {
        RecordingTransport {
            inner,
            clock,
            messages: Vec::new(),
        }
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }
}

impl<T: Transport, C: Clock> Transport for RecordingTransport<T, C> {
    fn fetch_poll(&mut self) -> Result<String, TransportError> {
        self.messages.push(Message {
            kind: MessageKind::PollRequest,
            at_ms: self.clock.now_ms(),
            payload_keys: BTreeSet::new(),
        });
        self.inner.fetch_poll()
    }

    fn submit(&mut self, body: &str) -> Result<(), TransportError> {
        let payload_keys = serde_json::from_str::<SubmissionDocument>(body)
            .map(|doc| doc.responses.into_keys().collect())
            .unwrap_or_default();
        self.messages.push(Message {
            kind: MessageKind::Submission,
            at_ms: self.clock.now_ms(),
            payload_keys,
        });
        self.inner.submit(body)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceSummary {
    pub messages_sent: usize,
    pub message_kinds: Vec<MessageKind>,
    pub payload_keys: Vec<BTreeSet<String>>,
    /// Submission time minus poll request time.
    pub emission_offset_ms: Option<u64>,
}

pub fn observable_trace(messages: &[Message]) -> TraceSummary {
    let start = messages
        .iter()
        .find(|m| m.kind == MessageKind::PollRequest)
        .map(|m| m.at_ms);
    let emitted = messages
        .iter()
        .find(|m| m.kind == MessageKind::Submission)
        .map(|m| m.at_ms);
    TraceSummary {
        messages_sent: messages.len(),
        message_kinds: messages.iter().map(|m| m.kind).collect(),
        payload_keys: messages.iter().map(|m| m.payload_keys.clone()).collect(),
        emission_offset_ms: start.zip(emitted).map(|(s, e)| e - s),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    Format(#[from] PollFormatError),
    #[error("poll is invalid: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidPoll(Vec<Violation>),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("session is not open")]
    NotOpen,
    #[error("deadline not reached")]
    DeadlineNotReached,
    #[error("unknown subtree `{0}`")]
    UnknownSubtree(String),
    #[error("`{path}` is not a leaf of subtree `{subtree}`")]
    UnknownLeaf { subtree: String, path: String },
}

/// Everything a client derives from the poll before answering: matrices,
/// leaf lookup and gate inputs. Shared read-only between sessions.
#[derive(Debug)]
pub struct PreparedPoll {
    pub poll: Poll,
    pub gates: GateInputs,
    matrices: Option<Vec<TransitionMatrix>>,
    pub index: LeafIndex,
}

impl PreparedPoll {
    /// Validates the poll and recomputes its cost. Structural violations are
    /// errors; threshold violations leave the poll preparable so that a
    /// session can refuse it.
    pub fn new(poll: Poll) -> Result<Self, SessionError> {
        let violations = poll::validate_poll(&poll);
        let structural: Vec<_> = violations.iter().filter(|v| !v.is_gate()).cloned().collect();
        if !structural.is_empty() {
            return Err(SessionError::InvalidPoll(structural));
        }
        let gates = GateInputs::compute(&poll);
        let matrices = if violations.is_empty() {
            Some(mechanism::build_matrices(&poll)?)
        } else {
            None
        };
        let index = LeafIndex::new(&poll);
        Ok(PreparedPoll {
            poll,
            gates,
            matrices,
            index,
        })
    }

    pub fn parse(document: &str) -> Result<Self, SessionError> {
        Self::new(poll::parse_poll(document)?)
    }

    pub fn matrices(&self) -> Option<&[TransitionMatrix]> {
        self.matrices.as_deref()
    }

    pub fn epsilon(&self) -> Option<&EpsilonValue> {
        self.gates.epsilon.as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionState {
    Refused,
    Open,
    Submitted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recorded {
    Stored,
    AfterDeadline,
}

/// Steps of the per-subtree finalize loop, reported to a [`Probe`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Step {
    Select,
    Randomize,
    Insert,
}

pub trait Probe {
    fn step(&mut self, step: Step);
}

pub struct NoProbe;

impl Probe for NoProbe {
    #[inline(always)]
    fn step(&mut self, _: Step) {}
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct StepCounter(pub BTreeMap<String, usize>);

impl Probe for StepCounter {
    fn step(&mut self, step: Step) {
        *self.0.entry(format!("{step:?}")).or_default() += 1;
    }
}

pub struct Session<C: Clock> {
    prepared: Arc<PreparedPoll>,
    clock: C,
    state: SessionState,
    admission: Admission,
    budget: BudgetState,
    prepopulated: Vec<usize>,
    shadow: Vec<Option<usize>>,
    started_at: u64,
    deadline: u64,
}

impl<C: Clock> std::fmt::Debug for Session<C> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // shadow answers are deliberately left out
        f.debug_struct("Session")
            .field("state", &self.state)
            .field("started_at", &self.started_at)
            .field("deadline", &self.deadline)
            .finish_non_exhaustive()
    }
}

/// Parses and validates a fetched poll and opens a session for it.
pub fn begin_session<R, C>(poll: Poll, budget: BudgetState, rng: &mut R, clock: C) -> Result<Session<C>, SessionError>
where
    R: RngCore + CryptoRng + ?Sized,
    C: Clock,
{
    Ok(Session::begin(Arc::new(PreparedPoll::new(poll)?), budget, rng, clock))
}

impl<C: Clock> Session<C> {
    /// Fetches the poll over `transport` and begins a session on it.
    pub fn fetch<T, R>(transport: &mut T, budget: BudgetState, rng: &mut R, clock: C) -> Result<Self, SessionError>
    where
        T: Transport + ?Sized,
        R: RngCore + CryptoRng + ?Sized,
    {
        let document = transport.fetch_poll()?;
        let prepared = PreparedPoll::parse(&document)?;
        Ok(Self::begin(Arc::new(prepared), budget, rng, clock))
    }

    /// Gates the poll against `budget`; on admission draws one uniform
    /// stand-in leaf per subtree, in poll order.
    pub fn begin<R>(prepared: Arc<PreparedPoll>, mut budget: BudgetState, rng: &mut R, clock: C) -> Self
    where
        R: RngCore + CryptoRng + ?Sized,
    {
        let started_at = clock.now_ms();
        let deadline = started_at + prepared.poll.timeout_ms;
        let admission = prepared.gates.decide(&mut budget);
        let (state, prepopulated) = match (admission.admitted, prepared.matrices()) {
            (true, Some(matrices)) => (
                SessionState::Open,
                matrices
                    .iter()
                    .map(|m| ExactSampler::uniform(m.len()).sample(rng))
                    .collect(),
            ),
            _ => (SessionState::Refused, Vec::new()),
        };
        let subtrees = prepared.poll.questions.len();
        Session {
            prepared,
            clock,
            state,
            admission,
            budget,
            prepopulated,
            shadow: vec![None; subtrees],
            started_at,
            deadline,
        }
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn admission(&self) -> &Admission {
        &self.admission
    }

    pub fn budget(&self) -> &BudgetState {
        &self.budget
    }

    pub fn deadline_ms(&self) -> u64 {
        self.deadline
    }

    pub fn started_at_ms(&self) -> u64 {
        self.started_at
    }

    pub fn prepared(&self) -> &PreparedPoll {
        &self.prepared
    }

    pub fn prepopulated(&self) -> &[usize] {
        &self.prepopulated
    }

    /// Leaf index each subtree would be randomized from right now.
    pub fn inputs(&self) -> Vec<usize> {
        self.shadow
            .iter()
            .zip(&self.prepopulated)
            .map(|(s, p)| s.unwrap_or(*p))
            .collect()
    }

    /// Records a true answer locally; later answers overwrite earlier ones.
    pub fn record_answer(&mut self, subtree_id: &str, leaf_path: &[String]) -> Result<Recorded, SessionError> {
        if self.state != SessionState::Open {
            return Err(SessionError::NotOpen);
        }
        let position = self
            .prepared
            .index
            .subtree_position(subtree_id)
            .ok_or_else(|| SessionError::UnknownSubtree(subtree_id.to_owned()))?;
        let leaf = self
            .prepared
            .index
            .leaf(subtree_id, leaf_path)
            .ok_or_else(|| SessionError::UnknownLeaf {
                subtree: subtree_id.to_owned(),
                path: leaf_path.join("/"),
            })?;
        if self.clock.now_ms() >= self.deadline {
            return Ok(Recorded::AfterDeadline);
        }
        self.shadow[position] = Some(leaf);
        Ok(Recorded::Stored)
    }

    /// Same as [`record_answer`](Self::record_answer) by subtree position
    /// and leaf index.
    pub fn record_leaf(&mut self, subtree: usize, leaf: usize) -> Result<Recorded, SessionError> {
        let question = self
            .prepared
            .poll
            .questions
            .get(subtree)
            .ok_or_else(|| SessionError::UnknownSubtree(subtree.to_string()))?;
        let path = poll::flatten(question)
            .into_iter()
            .nth(leaf)
            .ok_or_else(|| SessionError::UnknownLeaf {
                subtree: question.id.clone(),
                path: leaf.to_string(),
            })?
            .path;
        let id = question.id.clone();
        self.record_answer(&id, &path)
    }

    /// Timer hook: finalizes exactly once, on the first call at or after the
    /// deadline.
    pub fn tick<R, T>(&mut self, rng: &mut R, transport: &mut T) -> Result<Option<Submission>, SessionError>
    where
        R: RngCore + CryptoRng + ?Sized,
        T: Transport + ?Sized,
    {
        if self.state != SessionState::Open || self.clock.now_ms() < self.deadline {
            return Ok(None);
        }
        self.finalize(rng, transport).map(Some)
    }

    pub fn finalize<R, T>(&mut self, rng: &mut R, transport: &mut T) -> Result<Submission, SessionError>
    where
        R: RngCore + CryptoRng + ?Sized,
        T: Transport + ?Sized,
    {
        self.finalize_probed(rng, transport, &mut NoProbe)
    }

    /// Randomizes every subtree and sends the single submission. Answered
    /// and unanswered subtrees go through the same steps.
    pub fn finalize_probed<R, T, P>(&mut self, rng: &mut R, transport: &mut T, probe: &mut P) -> Result<Submission, SessionError>
    where
        R: RngCore + CryptoRng + ?Sized,
        T: Transport + ?Sized,
        P: Probe,
    {
        if self.state != SessionState::Open {
            return Err(SessionError::NotOpen);
        }
        if self.clock.now_ms() < self.deadline {
            return Err(SessionError::DeadlineNotReached);
        }
        self.state = SessionState::Submitted;
        let matrices = self.prepared.matrices().expect("open sessions have matrices");
        let mut responses = BTreeMap::new();
        for (i, m) in matrices.iter().enumerate() {
            let candidates = [self.prepopulated[i], self.shadow[i].unwrap_or(self.prepopulated[i])];
            let input = candidates[self.shadow[i].is_some() as usize];
            probe.step(Step::Select);
            let output = mechanism::randomize(input, m, rng);
            probe.step(Step::Randomize);
            responses.insert(m.subtree().to_owned(), m.leaves()[output].path.clone());
            probe.step(Step::Insert);
        }
        let submission = SubmissionDocument { responses };
        transport.submit(&submission.to_json())?;
        Ok(submission)
    }
}
