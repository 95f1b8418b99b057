//! Deterministic random streams derived from a run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a random stream is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Purpose {
    Init,
    Gumbel,
    Dropout,
    Split,
    Pseudo,
    Oracle,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 1,
            Purpose::Gumbel => 2,
            Purpose::Dropout => 3,
            Purpose::Split => 4,
            Purpose::Pseudo => 5,
            Purpose::Oracle => 6,
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of the stream for `(purpose, step, layer)` under `seed`.
pub fn stream_seed(seed: u64, purpose: Purpose, step: u64, layer: u64) -> u64 {
    let mut h = splitmix(seed);
    for part in [purpose.tag(), step, layer] {
        h = splitmix(h ^ part);
    }
    h
}

/// Child seed number `index` of `seed`.
pub fn derive(seed: u64, index: u64) -> u64 {
    splitmix(splitmix(seed) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

pub fn stream(seed: u64, purpose: Purpose, step: u64, layer: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, purpose, step, layer))
}

/// Stream for initializing the parameter called `name`.
pub fn name_stream(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    stream(seed, Purpose::Init, h, 0)
}
