//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha`), a
//! portable counter-mode generator whose output is fixed by its published
//! algorithm. A stream is addressed by `(seed, purpose, index)`: the purpose
//! tag and seed are mixed into the 256-bit key with SplitMix64, and the index
//! selects ChaCha's 64-bit stream counter. Streams are independent of the
//! order in which they are requested, so per-sequence work can be scheduled
//! freely without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share key material.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Cohort = 1,
    Init = 2,
    Masking = 3,
    Dropout = 4,
    Shuffle = 5,
    Split = 6,
    HeadInit = 7,
    EvalMasking = 8,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Opens stream `index` of `purpose` under `seed`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> Rng {
    let mut state = seed ^ ((purpose as u64) << 56);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Seed for an independent sub-run (a data split, say) of a seeded run.
pub fn child_seed(seed: u64, salt: u64) -> u64 {
    let mut state = seed ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03);
    splitmix64(&mut state)
}

/// Stream index for per-epoch, per-sequence work.
pub fn epoch_index(epoch: usize, item: usize) -> u64 {
    ((epoch as u64) << 32) | (item as u64 & 0xFFFF_FFFF)
}
