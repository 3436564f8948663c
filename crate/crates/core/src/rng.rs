//! Seeded random streams.
//!
//! Every random draw is keyed by `(seed, stream id)`, so distinct purposes
//! (supports, coefficients, designs, noise, test sets, folds) never share a
//! sequence and results do not depend on the order tasks run in.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum StreamKind {
    Supports = 1,
    Truth = 2,
    Design = 3,
    Noise = 4,
    TestSet = 5,
    Folds = 6,
    MonteCarlo = 7,
}

/// Independent generator for `(seed, kind, index)`.
pub fn stream(seed: u64, kind: StreamKind, index: u32) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(((kind as u64) << 32) | index as u64);
    rng
}

/// Child seed for task `index` under `root`, via the SplitMix64 finalizer.
pub fn derive_seed(root: u64, index: u64) -> u64 {
    let mut z = root ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
