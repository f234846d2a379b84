//! Seeded feature-hashing embedder for token chunks.

/// SplitMix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Hashed bag-of-tokens embedding. Every non-PAD token adds `±1` at a
/// seeded hash coordinate (sign from the top hash bit); the counts are
/// L2-normalized. A chunk with nothing left (all PAD, or cancelling
/// contributions) maps to `e1`.
pub fn embed_chunk(tokens: &[u32], d: usize, seed: u64) -> Vec<f32> {
    assert!(d >= 2, "embedding dimension must be at least 2");
    let mut acc = vec![0f64; d];
    for &t in tokens {
        if t == crate::tokenizer::PAD {
            continue;
        }
        let h = mix64(seed ^ mix64(t as u64));
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        acc[(h % d as u64) as usize] += sign;
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        let mut e1 = vec![0f32; d];
        e1[0] = 1.0;
        return e1;
    }
    acc.iter().map(|&x| (x / norm) as f32).collect()
}

/// Squared L2 distance, accumulated in f64.
pub fn l2_distance_sq(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            let d = a[c * 4 + l] as f64 - b[c * 4 + l] as f64;
            acc[l] += d * d;
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        s += d * d;
    }
    s
}
