//! Seed derivation. Every random stream in a run is keyed by
//! `(root seed, purpose, index)` so that streams do not depend on the order
//! in which other streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purposes with their own independent stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Init,
    Dropout,
    Augment,
    Order,
    Sample,
    TrainSplit,
    ValSplit,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 0x494e_4954,
            Purpose::Dropout => 0x4452_4f50,
            Purpose::Augment => 0x4155_474d,
            Purpose::Order => 0x4f52_4452,
            Purpose::Sample => 0x534d_504c,
            Purpose::TrainSplit => 0x5452_4e44,
            Purpose::ValSplit => 0x5641_4c44,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, purpose: Purpose, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(root) ^ purpose.tag()) ^ index)
}

pub fn stream(root: u64, purpose: Purpose, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(root, purpose, index))
}
