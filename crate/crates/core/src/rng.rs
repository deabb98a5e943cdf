//! Deterministic, counter-addressable random-number substreams.
//!
//! Every random quantity in the simulator is drawn from a stream addressed by
//! a path of integer ids under one root seed (seed → replicate → context, and
//! so on). Streams at distinct addresses are statistically independent and
//! reproduce bit-identically regardless of thread scheduling or evaluation
//! order, which is what makes seeded runs byte-stable under `--threads`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One level of key derivation: fold `id` into `key` and scramble with the
/// splitmix64 finalizer. For a fixed key the map id → key' is injective.
fn mix(key: u64, id: u64) -> u64 {
    let mut s = key ^ id.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    s = (s ^ (s >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    s = (s ^ (s >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    s ^ (s >> 31)
}

/// Advance a splitmix64 state and return the next output word.
fn splitmix_next(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// An addressable family of independent RNG substreams under one seed.
///
/// `RngStream` is a cheap value type: [`child`](Self::child) derives the
/// stream for a sub-task and [`rng`](Self::rng) materializes a generator at
/// the current address.
#[derive(Clone, Copy, Debug)]
pub struct RngStream {
    key: u64,
}

impl RngStream {
    /// Root stream for a run seed.
    pub fn new(seed: u64) -> Self {
        // Scramble once so that small seeds do not produce small keys.
        Self { key: mix(0x243f_6a88_85a3_08d3, seed) }
    }

    /// Derive the substream with the given id (replicate index, context
    /// index, purpose tag, ...).
    pub fn child(&self, id: u64) -> Self {
        Self { key: mix(self.key, id) }
    }

    /// Materialize the generator at this address.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut state = self.key;
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix_next(&mut state).to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}
