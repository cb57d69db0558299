//! Deterministic random streams.
//!
//! Every consumer of randomness gets a private ChaCha stream keyed by the run
//! seed and a tuple of indices, so results never depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    ModelInit = 1,
    BankInit = 2,
    EpochOrder = 3,
    WeakView = 4,
    ContrastiveView = 5,
    Dataset = 6,
    Probe = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `(seed, tag, indices...)`.
pub fn stream(seed: u64, tag: Stream, indices: &[u64]) -> Rng {
    let mut h = splitmix(seed ^ splitmix(tag as u64));
    for &i in indices {
        h = splitmix(h ^ splitmix(i.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, Stream::WeakView, &[1, 2]).random();
        let b: u64 = stream(7, Stream::WeakView, &[1, 2]).random();
        let c: u64 = stream(7, Stream::ContrastiveView, &[1, 2]).random();
        let d: u64 = stream(7, Stream::WeakView, &[2, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
