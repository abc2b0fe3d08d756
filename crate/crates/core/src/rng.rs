//! Keyed random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 stream whose
//! key is derived from a master seed and a path of indices (Monte Carlo
//! repetition, bootstrap replicate, purpose). A replicate therefore sees the
//! same numbers no matter which thread runs it or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Purpose tags for child streams.
pub mod purpose {
    pub const DATA: u64 = 1;
    pub const BOOTSTRAP: u64 = 2;
    pub const ROW_INDICES: u64 = 3;
    pub const UNIFORMS: u64 = 4;
    pub const GROUP_A: u64 = 5;
    pub const GROUP_B: u64 = 6;
    pub const FOLDS: u64 = 7;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey(mix(seed ^ 0x5EED_0F_0A11_u64))
    }

    /// Derives an independent key for sub-stream `index`.
    pub fn child(self, index: u64) -> Self {
        StreamKey(mix(self.0 ^ mix(index.wrapping_mul(GOLDEN).wrapping_add(GOLDEN))))
    }

    pub fn rng(self) -> ChaCha8Rng {
        let mut bytes = [0u8; 32];
        let mut s = self.0;
        for chunk in bytes.chunks_exact_mut(8) {
            s = s.wrapping_add(GOLDEN);
            chunk.copy_from_slice(&mix(s).to_le_bytes());
        }
        ChaCha8Rng::from_seed(bytes)
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}
