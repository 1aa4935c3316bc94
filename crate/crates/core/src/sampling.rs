//! Exact sampling from rational distributions.
//!
//! A distribution `p_0..p_k` with common denominator `L` (the lcm of the
//! entries' denominators) is mapped onto the integer ranges
//! `[1, L·p_0]`, `(L·p_0, L·(p_0+p_1)]`, ... A uniform integer `u ∈ [1, L]`
//! then selects outcome `i` with probability exactly `p_i`.
//!
//! Uniform integers are drawn by rejection from whole 64-bit words so the
//! output is unbiased and the consumption of the random stream is fully
//! specified:
//!
//! * `L ≤ 2^64`: draw `v = next_u64()`, reject while `v ≥ 2^64 - (2^64 mod L)`,
//!   return `v mod L + 1`.
//! * larger `L`: draw `ceil(bits(L-1) / 64)` words little-endian, mask the
//!   top word to `bits(L-1)` bits, reject while the value `≥ L`, return
//!   value `+ 1`.

use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};
use rand_core::RngCore;

use crate::rational::Rational;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SamplerError {
    #[error("distribution is empty")]
    Empty,
    #[error("distribution has a negative entry")]
    Negative,
    #[error("distribution sums to {0}, not 1")]
    NotNormalized(String),
}

#[derive(Debug, Clone)]
enum Bounds {
    Small { modulus: u64, cumulative: Vec<u64> },
    Big { modulus: BigUint, cumulative: Vec<BigUint> },
}

/// Precomputed cumulative integer ranges for one exact distribution.
#[derive(Debug, Clone)]
pub struct ExactSampler {
    bounds: Bounds,
}

impl ExactSampler {
    pub fn new(probabilities: &[Rational]) -> Result<Self, SamplerError> {
        if probabilities.is_empty() {
            return Err(SamplerError::Empty);
        }
        if probabilities.iter().any(|p| p < &Rational::zero()) {
            return Err(SamplerError::Negative);
        }
        let total: Rational = probabilities.iter().sum();
        if !total.is_one() {
            return Err(SamplerError::NotNormalized(crate::rational::format_rational(&total)));
        }
        let modulus = probabilities
            .iter()
            .fold(BigInt::one(), |acc, p| acc.lcm(p.denom()));
        let mut running = BigInt::zero();
        let cumulative: Vec<BigInt> = probabilities
            .iter()
            .map(|p| {
                running += p.numer() * (&modulus / p.denom());
                running.clone()
            })
            .collect();
        debug_assert_eq!(cumulative.last(), Some(&modulus));

        let modulus = modulus.to_biguint().expect("lcm of denominators is positive");
        let cumulative: Vec<BigUint> = cumulative
            .into_iter()
            .map(|c| c.to_biguint().expect("cumulative mass is nonnegative"))
            .collect();
        let bounds = match modulus.to_u64() {
            Some(m) => Bounds::Small {
                modulus: m,
                cumulative: cumulative.iter().map(|c| c.to_u64().unwrap()).collect(),
            },
            None => Bounds::Big { modulus, cumulative },
        };
        Ok(ExactSampler { bounds })
    }

    /// Uniform over `0..k`.
    pub fn uniform(k: usize) -> Self {
        assert!(k > 0, "uniform sampler over an empty range");
        let k = k as u64;
        ExactSampler {
            bounds: Bounds::Small {
                modulus: k,
                cumulative: (1..=k).collect(),
            },
        }
    }

    pub fn len(&self) -> usize {
        match &self.bounds {
            Bounds::Small { cumulative, .. } => cumulative.len(),
            Bounds::Big { cumulative, .. } => cumulative.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The common denominator `L`.
    pub fn modulus(&self) -> BigUint {
        match &self.bounds {
            Bounds::Small { modulus, .. } => BigUint::from(*modulus),
            Bounds::Big { modulus, .. } => modulus.clone(),
        }
    }

    /// Outcome selected by a given `u ∈ [1, L]`.
    pub fn outcome_for(&self, u: &BigUint) -> usize {
        match &self.bounds {
            Bounds::Small { cumulative, .. } => {
                let u = u.to_u64().expect("u within modulus");
                cumulative.partition_point(|&c| c < u)
            }
            Bounds::Big { cumulative, .. } => cumulative.partition_point(|c| c < u),
        }
    }

    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> usize {
        match &self.bounds {
            Bounds::Small { modulus, cumulative } => {
                let u = uniform_u64(rng, *modulus);
                cumulative.partition_point(|&c| c < u)
            }
            Bounds::Big { modulus, cumulative } => {
                let u = uniform_big(rng, modulus);
                cumulative.partition_point(|c| c < &u)
            }
        }
    }
}

/// Uniform integer in `[1, modulus]`.
pub fn uniform_u64<R: RngCore + ?Sized>(rng: &mut R, modulus: u64) -> u64 {
    assert!(modulus > 0);
    // zone = 2^64 - (2^64 mod modulus), computed without overflow
    let rem = (u64::MAX % modulus + 1) % modulus;
    loop {
        let v = rng.next_u64();
        if rem == 0 || v < u64::MAX - rem + 1 {
            return v % modulus + 1;
        }
    }
}

/// Uniform integer in `[1, modulus]` for moduli beyond 64 bits.
pub fn uniform_big<R: RngCore + ?Sized>(rng: &mut R, modulus: &BigUint) -> BigUint {
    let span = modulus - 1u32;
    let bits = span.bits().max(1);
    let words = bits.div_ceil(64) as usize;
    let top_bits = bits - 64 * (words as u64 - 1);
    let mask = if top_bits == 64 { u64::MAX } else { (1u64 << top_bits) - 1 };
    loop {
        let mut digits: Vec<u64> = (0..words).map(|_| rng.next_u64()).collect();
        *digits.last_mut().unwrap() &= mask;
        let candidate = BigUint::from_slice(
            &digits
                .iter()
                .flat_map(|w| [*w as u32, (*w >> 32) as u32])
                .collect::<Vec<_>>(),
        );
        if &candidate < modulus {
            return candidate + 1u32;
        }
    }
}
