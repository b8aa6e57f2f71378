//! Deterministic RNG streams keyed by purpose and position, so results do not
//! depend on iteration order or on how a run was split across resumes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv(bytes: &[u8], mut h: u64) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Independent stream for `(seed, domain, a, b)`.
pub fn stream(seed: u64, domain: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = fnv(domain.as_bytes(), 0xcbf29ce484222325);
    h = fnv(&a.to_le_bytes(), h);
    h = fnv(&b.to_le_bytes(), h);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}
