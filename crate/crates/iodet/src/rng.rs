//! Deterministic, splittable randomness.
//!
//! All randomness in the crate flows from a single run seed through named
//! sub-streams. A stream is addressed by a label path such as
//! `("data", 0)` or `("shuffle", phase, epoch)`; the label is folded into
//! the seed with SplitMix64, and the resulting 64-bit value seeds a
//! ChaCha8 generator. ChaCha8 output is specified by the `rand_chacha`
//! crate and is stable across platforms and releases, so identical seeds
//! reproduce identical corpora, initializations, and shuffles everywhere.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; used to fold label parts into a seed.
pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A derivable seed. `derive` produces an independent child seed for a
/// named purpose; `stream` produces the generator itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seed(pub u64);

impl Seed {
    pub fn new(value: u64) -> Self {
        Seed(value)
    }

    /// Child seed for a named purpose. Equal labels give equal children;
    /// different labels give statistically independent ones.
    pub fn derive(self, label: &str) -> Seed {
        let mut state = splitmix64(self.0);
        for byte in label.bytes() {
            state = splitmix64(state ^ u64::from(byte));
        }
        Seed(state)
    }

    /// Child seed indexed by a number (phase, epoch, image id, ...).
    pub fn derive_index(self, index: u64) -> Seed {
        Seed(splitmix64(self.0 ^ splitmix64(index)))
    }

    pub fn stream(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
