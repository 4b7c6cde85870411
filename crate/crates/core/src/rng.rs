//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha8 stream from the root
//! seed and a stable label, optionally indexed (per step, per epoch, per
//! pair). Streams never share state, so reordering or skipping one consumer
//! leaves the others untouched, and a resumed training run reproduces the
//! exact draws of an uninterrupted one.
//!
//! Labels in use:
//! - `init`: network weight initialization
//! - `shuffle`: per-epoch base-image order
//! - `pair`: per-pair homography, crop and augmentation draws
//! - `mining`: false-positive sampling for the backprop mask
//! - `ransac`: minimal-sample selection during registration
//! - `gen-pairs`: offline pair synthesis from the CLI

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `label` under `seed`.
pub fn stream(seed: u64, label: &str) -> Stream {
    indexed_stream(seed, label, 0)
}

/// Stream for `label` under `seed`, further split by `index`.
pub fn indexed_stream(seed: u64, label: &str, index: u64) -> Stream {
    let key = splitmix(seed ^ splitmix(fnv1a(label.as_bytes())));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}
