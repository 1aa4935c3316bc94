use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// How independent units of work (respondents, matrix rows) are scheduled.
/// Results are always merged by index, so both produce identical output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    /// Data-parallel over a rayon pool. Without the `parallel` feature this
    /// runs sequentially.
    #[default]
    Parallel,
}

/// Seed for unit `index` of a run: `SHA-256(le64(master) || le64(index))`.
pub fn respondent_seed(master: u64, index: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(index.to_le_bytes());
    hasher.finalize().into()
}

/// Session stream (stream 0) and an independent persona stream (stream 1)
/// from the same seed. The session stream is the one golden vectors pin.
pub fn streams(seed: [u8; 32]) -> (ChaCha20Rng, ChaCha20Rng) {
    let session = ChaCha20Rng::from_seed(seed);
    let mut persona = ChaCha20Rng::from_seed(seed);
    persona.set_stream(1);
    (session, persona)
}

impl Execution {
    /// `(0..n).map(f)` under this schedule, in index order.
    pub fn map<T, F>(self, n: u64, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(u64) -> T + Sync + Send,
    {
        match self {
            Execution::Sequential => (0..n).map(f).collect(),
            Execution::Parallel => parallel_map(n, f),
        }
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T, F>(n: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, F>(n: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}
