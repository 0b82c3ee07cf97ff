//! Seed derivation.
//!
//! Every random draw in the pipeline comes from a ChaCha stream keyed by a
//! base seed plus a short path of stream ids, so e.g. the crop of image `i`
//! at epoch `e` never depends on how many other draws happened before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derive an independent generator from `seed` and a stream path.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    let mut h = Sha256::new();
    h.update(b"condense-stream");
    h.update(seed.to_le_bytes());
    for p in path {
        h.update(p.to_le_bytes());
    }
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Named stream ids, so call sites do not collide by accident.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const SYNTH_INIT: u64 = 4;
    pub const RECOVER_CROP: u64 = 5;
    pub const CROP_PLAN: u64 = 6;
    pub const CUTMIX: u64 = 7;
    pub const CLASS_ORDER: u64 = 8;
    pub const TOY_DATA: u64 = 9;
}
