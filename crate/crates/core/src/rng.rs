//! Seeded random streams.
//!
//! Every stochastic component takes its own stream derived from the run
//! seed, so adding a draw in one place never shifts another component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng64 = ChaCha8Rng;

/// Stream ids used across the crate.
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const BATCHES: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const VALIDATION: u64 = 5;
    pub const EMBEDDING: u64 = 6;
    pub const SEEDS: u64 = 7;
    pub const PROJECTION: u64 = 8;
    pub const GMM: u64 = 9;
    pub const SYNTH: u64 = 10;
    pub const PRIORS: u64 = 11;
    pub const PRE_EMBEDDING: u64 = 12;
}

pub fn seeded(seed: u64, stream: u64) -> Rng64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives an independent child stream from a parent rng.
pub fn fork<R: rand::Rng + ?Sized>(parent: &mut R, stream: u64) -> Rng64 {
    seeded(parent.random(), stream)
}
