//! Named, reproducible random streams derived from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: impl IntoIterator<Item = u8>, mut h: u64) -> u64 {
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent stream for `(seed, name, index...)`. Streams with different
/// names or indices never overlap.
pub fn stream(seed: u64, name: &str, index: &[u64]) -> ChaCha8Rng {
    let mut h = fnv1a(name.bytes(), 0xcbf2_9ce4_8422_2325);
    for &i in index {
        h = fnv1a(i.to_le_bytes(), h);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}
