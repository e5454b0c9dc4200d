//! Deterministic derivation of child seeds from the single run seed.

/// SplitMix64 finalizer applied to `base ⊕ stream`.
pub fn derive(base: u64, stream: u64) -> u64 {
    let mut z = base
        ^ stream
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const STREAM_FOLDS: u64 = 1;
pub const STREAM_MODEL: u64 = 2;
pub const STREAM_SHUFFLE: u64 = 3;
pub const STREAM_DROPOUT: u64 = 4;
pub const STREAM_VALIDATION: u64 = 5;
pub const STREAM_EDMD: u64 = 6;
pub const STREAM_PERMUTE: u64 = 7;
