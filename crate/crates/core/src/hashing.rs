//! Stable hashing and counter-based random variates.
//!
//! Everything here is a pure function of its inputs so that hash families,
//! feature ids and bin tokens agree across processes, platforms and releases.

use std::hash::Hasher;

use fnv::FnvHasher;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer. A bijection on `u64` with full avalanche.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 64-bit key from a seed and a sequence of counters.
#[inline]
pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    let mut h = mix64(seed ^ GOLDEN);
    for (i, &p) in parts.iter().enumerate() {
        h = mix64(h ^ p.wrapping_add(GOLDEN.wrapping_mul(i as u64 + 1)));
    }
    h
}

/// 64-bit FNV-1a over raw bytes.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Uniform variate in the half-open interval `(0, 1]`.
#[inline]
pub fn unit_open(key: u64) -> f64 {
    ((key >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
}

/// Uniform variate in `[0, 1)`.
#[inline]
pub fn unit(key: u64) -> f64 {
    (key >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal variate for `key` (Box-Muller over two derived lanes).
#[inline]
pub fn standard_normal(key: u64) -> f64 {
    let u1 = unit_open(mix64(key ^ 0x5851_F42D_4C95_7F2D));
    let u2 = unit(mix64(key ^ 0x1405_7B7E_F767_814F));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Digest of a slice of 64-bit values.
pub fn digest_values(values: &[u64]) -> u64 {
    let mut h = FnvHasher::default();
    for v in values {
        h.write_u64(*v);
    }
    mix64(h.finish())
}
