//! Seeded, splittable random-number streams.
//!
//! Every stochastic component in this crate draws from a [`RngStream`], a
//! counter-keyed ChaCha8 generator derived from a master seed plus stream
//! identifiers. Identical (seed, stream ids, draw count) always reproduces
//! the same draws, and distinct streams are independent by construction, so
//! work can be farmed out across threads without losing bitwise
//! reproducibility.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; the standard seed-expansion mixer.
#[inline]
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Collapse an arbitrary list of identifiers into a single 64-bit seed.
pub fn mix(parts: &[u64]) -> u64 {
    let mut state = 0x243F_6A88_85A3_08D3; // arbitrary nonzero start
    let mut acc = 0u64;
    for &p in parts {
        state ^= p;
        acc ^= splitmix64(&mut state);
    }
    acc ^ splitmix64(&mut state)
}

/// A named position in the global stream tree: (seed, stream).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream }
    }

    /// Instantiate the generator for this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        chacha_from(&[self.seed, self.stream])
    }

    /// Derive a child stream, e.g. per individual or per replication.
    pub fn child(&self, id: u64) -> RngStream {
        RngStream {
            seed: self.seed,
            stream: mix(&[self.stream, id]),
        }
    }
}

/// Build a ChaCha8 generator keyed by the given identifier list.
pub fn chacha_from(parts: &[u64]) -> ChaCha8Rng {
    let mut state = mix(parts);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
