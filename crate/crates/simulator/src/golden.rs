//! Reference vectors for other implementations of the respondent engine.
//!
//! Each vector fixes a 32-byte seed and the respondent's answers; the
//! expected submission is what the engine sends at the deadline. Replaying a
//! vector takes, in order:
//!
//! 1. a ChaCha20 generator (20 rounds, stream 0) seeded with `seed`;
//! 2. one uniform stand-in draw per subtree, in poll order;
//! 3. the recorded answers, which consume no randomness;
//! 4. one draw from each subtree's mechanism row, in poll order.
//!
//! Every draw uses the exact sampler's rejection scheme on `next_u64`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_core::RngCore;
use rrpoll_core::mechanism::BudgetState;
use rrpoll_core::poll::{flatten, serialize_poll, Poll};
use rrpoll_core::respondent::{LogicalClock, LoopbackTransport, PreparedPoll, Session, SessionError, SessionState};
use rrpoll_core::rational::format_rational;
use rrpoll_core::sampling::uniform_u64;
use serde::{Deserialize, Serialize};

use crate::exec;

pub const GOLDEN_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenVector {
    /// Hex-encoded 32-byte ChaCha20 seed.
    pub seed: String,
    /// Answered subtrees and the leaf path chosen in each.
    pub answers: BTreeMap<String, Vec<String>>,
    /// Stand-in leaf paths drawn at session start.
    pub prepopulated: BTreeMap<String, Vec<String>>,
    /// Exact request body sent at the deadline.
    pub submission: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenFile {
    pub schema: u32,
    pub rng: String,
    pub poll: serde_json::Value,
    pub epsilon: Option<f64>,
    pub epsilon_exact_ratio: Option<String>,
    pub vectors: Vec<GoldenVector>,
}

#[derive(Debug, thiserror::Error)]
pub enum GoldenError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("the poll is refused under its own budget; no vectors can be produced")]
    Refused,
    #[error("poll: {0}")]
    Poll(String),
    #[error("bad seed {0:?}: expected 64 hex digits")]
    Seed(String),
    #[error("vector answers {0:?}, which is not a leaf of the poll")]
    Answer(String),
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(text: &str) -> Option<[u8; 32]> {
    if text.len() != 64 || !text.is_ascii() {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, byte) in out.iter_mut().enumerate() {
        *byte = u8::from_str_radix(&text[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

/// Runs one session from `seed` with the given answers and returns the
/// stand-ins drawn and the submission body.
pub fn replay(
    prepared: &Arc<PreparedPoll>,
    seed: [u8; 32],
    answers: &BTreeMap<String, Vec<String>>,
) -> Result<(BTreeMap<String, Vec<String>>, String), GoldenError> {
    let (mut rng, _) = exec::streams(seed);
    let clock = LogicalClock::new(0);
    let mut session = Session::begin(prepared.clone(), BudgetState::from_poll(&prepared.poll), &mut rng, clock.clone());
    if session.state() != SessionState::Open {
        return Err(GoldenError::Refused);
    }
    let prepopulated = prepared
        .poll
        .questions
        .iter()
        .zip(session.prepopulated())
        .map(|(q, &leaf)| (q.id.clone(), flatten(q)[leaf].path.clone()))
        .collect();
    for (subtree, path) in answers {
        session.record_answer(subtree, path)?;
    }
    clock.set(session.deadline_ms());
    let mut transport = LoopbackTransport::new(serialize_poll(&prepared.poll));
    session.finalize(&mut rng, &mut transport)?;
    Ok((prepopulated, transport.submissions.pop().expect("finalize submits")))
}

/// `count` vectors cycling through no, some and all questions answered.
/// Answers come from a separate stream of each seed so they do not disturb
/// the session's draws.
pub fn generate(poll: &Poll, count: u64, master_seed: u64) -> Result<GoldenFile, GoldenError> {
    let prepared = Arc::new(PreparedPoll::new(poll.clone())?);
    let mut vectors = Vec::with_capacity(count as usize);
    for i in 0..count {
        let seed = exec::respondent_seed(master_seed, i);
        let (_, mut persona) = exec::streams(seed);
        let mut answers = BTreeMap::new();
        for q in &poll.questions {
            let leaves = flatten(q);
            let leaf = (uniform_u64(&mut persona, leaves.len() as u64) - 1) as usize;
            let answer = match i % 3 {
                0 => false,
                1 => persona.next_u32() & 1 == 1,
                _ => true,
            };
            if answer {
                answers.insert(q.id.clone(), leaves[leaf].path.clone());
            }
        }
        let (prepopulated, submission) = replay(&prepared, seed, &answers)?;
        vectors.push(GoldenVector {
            seed: hex(&seed),
            answers,
            prepopulated,
            submission,
        });
    }
    Ok(GoldenFile {
        schema: GOLDEN_SCHEMA,
        rng: "ChaCha20, 20 rounds, stream 0, 32-byte seed; uniform integers by rejection on next_u64".into(),
        poll: serde_json::from_str(&serialize_poll(poll)).expect("canonical poll is JSON"),
        epsilon: prepared.epsilon().map(|e| e.value),
        epsilon_exact_ratio: prepared.epsilon().and_then(|e| e.exact_ratio.as_ref()).map(format_rational),
        vectors,
    })
}

/// Replays every vector and returns the indices whose submission differs.
pub fn verify(file: &GoldenFile) -> Result<Vec<usize>, GoldenError> {
    let poll: Poll = serde_json::from_value(file.poll.clone()).map_err(|e| GoldenError::Poll(e.to_string()))?;
    let prepared = Arc::new(PreparedPoll::new(poll)?);
    let mut mismatched = Vec::new();
    for (i, v) in file.vectors.iter().enumerate() {
        let seed = unhex(&v.seed).ok_or_else(|| GoldenError::Seed(v.seed.clone()))?;
        let (prepopulated, submission) = match replay(&prepared, seed, &v.answers) {
            Err(GoldenError::Session(SessionError::UnknownLeaf { subtree, path })) => {
                return Err(GoldenError::Answer(format!("{subtree}:{path}")))
            }
            other => other?,
        };
        if submission != v.submission || prepopulated != v.prepopulated {
            mismatched.push(i);
        }
    }
    Ok(mismatched)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_round_trip() {
        let seed = exec::respondent_seed(3, 4);
        assert_eq!(unhex(&hex(&seed)), Some(seed));
        assert_eq!(unhex("zz"), None);
    }
}
