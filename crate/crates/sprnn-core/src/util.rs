//! Small shared helpers.

/// FNV-1a 64-bit hash; used for run manifests and trace checksums.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

/// FNV-1a over the little-endian bit patterns of a float slice.
pub fn fnv1a64_f32(values: &[f32]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100_0000_01b3);
        }
    }
    hash
}

/// Largest relative difference between paired elements, with an absolute
/// floor of 1.0 on the denominator region near zero.
pub fn max_rel_err(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len(), "max_rel_err requires equal lengths");
    let mut worst = 0.0f32;
    for (&x, &y) in a.iter().zip(b) {
        let denom = x.abs().max(y.abs()).max(1.0);
        let err = (x - y).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    worst
}
