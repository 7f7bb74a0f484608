//! Seeded random streams. Every stochastic component draws from its own
//! ChaCha stream derived from the run seed, so components never perturb each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

/// Generator for `(seed, stream)`; distinct streams are independent.
pub fn keyed_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Named substreams of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data,
    Glance,
    Init,
    Reseed,
    Dropout,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 0x1000,
            Stream::Glance => 0x2000,
            Stream::Init => 0x3000,
            Stream::Reseed => 0x4000,
            Stream::Dropout => 0x5000,
        }
    }
}

pub fn stream(seed: u64, s: Stream) -> Rng {
    // Scramble the seed so per-stream keys do not collide with the data module's
    // per-sentence streams under the same seed.
    keyed_rng(seed ^ 0x9e37_79b9_7f4a_7c15, s.id())
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
