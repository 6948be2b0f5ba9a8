//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by the global
//! seed and selected by a purpose tag plus integer coordinates (clip, clone,
//! step, ...). The draw counter is the ChaCha block counter, so a stream's output
//! never depends on which thread consumes it or on what other streams did.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for; keeps streams for different purposes disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Mask = 2,
    DropPath = 3,
    Augment = 4,
    Shuffle = 5,
    Synth = 6,
    Dropout = 7,
    Sampling = 8,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a purpose and coordinates into a stream id.
pub fn stream_id(purpose: Purpose, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix(purpose as u64), |acc, &c| splitmix(acc ^ splitmix(c)))
}

/// A fresh generator positioned at draw zero of the selected stream.
pub fn stream(seed: u64, purpose: Purpose, coords: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(purpose, coords));
    rng
}

/// A 64-bit child seed for the selected stream, for APIs that take a seed.
pub fn derive_seed(seed: u64, purpose: Purpose, coords: &[u64]) -> u64 {
    splitmix(seed ^ stream_id(purpose, coords))
}
