//! Seeded random streams. Every consumer of randomness owns a stream keyed
//! by `(seed, stream-id)`, so identical seeds give identical draws no matter
//! what other streams have consumed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Well-known stream ids.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const GUMBEL: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const INIT: u64 = 4;
    pub const PROFILE: u64 = 5;
    pub const ARCH_SUBSET: u64 = 6;
    pub const ROUTING: u64 = 7;
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

/// Serializable position of a stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// ChaCha word position, kept as a decimal string since it is a u128.
    pub word_pos: String,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        loop {
            let u: f64 = self.rng.random();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        mean + std * z
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Standard Gumbel sample `-ln(-ln u)`.
    pub fn gumbel(&mut self) -> f64 {
        -(-self.uniform().ln()).ln()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        // Fisher-Yates, kept local so the draw sequence is pinned to this code.
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &RngState) -> crate::Result<Self> {
        let pos: u128 = state
            .word_pos
            .parse()
            .map_err(|_| crate::Error::format("rng state", format!("bad word_pos `{}`", state.word_pos)))?;
        let mut s = Self::new(state.seed, state.stream);
        s.rng.set_word_pos(pos);
        Ok(s)
    }
}
