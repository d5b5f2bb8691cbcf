//! Keyed random streams: every `(seed, tag, parts...)` key gets its own
//! generator, so draws never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

pub(crate) fn keyed_rng(seed: u64, tag: &str, parts: &[&[u8]]) -> ChaCha12Rng {
    let mut h = Sha256::new();
    h.update(b"caia");
    h.update(seed.to_le_bytes());
    for p in std::iter::once(tag.as_bytes()).chain(parts.iter().copied()) {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    ChaCha12Rng::from_seed(h.finalize().into())
}
