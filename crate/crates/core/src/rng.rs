//! Keyed, counter-style random streams.
//!
//! Every random draw in the crate is addressed by a root seed plus a path of
//! integer keys (for example `[epoch, step, utterance]`). The key path is
//! hashed into an independent ChaCha stream, so the values a consumer sees do
//! not depend on the order in which other streams were created or consumed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Domain tags so that streams for different purposes never collide.
pub mod stream {
    pub const SPEAKERS: u64 = 1;
    pub const SESSIONS: u64 = 2;
    pub const FRAMES: u64 = 3;
    pub const TRIALS: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const CROP: u64 = 7;
    pub const NOISE: u64 = 8;
    pub const PROJECTION: u64 = 9;
    pub const ROTATION: u64 = 10;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    key: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { key: splitmix(seed) }
    }

    /// Child node addressed by `index`.
    pub fn child(&self, index: u64) -> Self {
        Self {
            key: splitmix(self.key ^ splitmix(index.wrapping_add(GOLDEN))),
        }
    }

    pub fn path(&self, indices: &[u64]) -> Self {
        indices.iter().fold(*self, |node, &i| node.child(i))
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
