//! Seeded random streams.
//!
//! Every random draw in the crate flows through [`stream_rng`]: a ChaCha8
//! counter-mode generator keyed by the caller's seed, with one stream per
//! purpose. Identical `(seed, stream, index)` triples produce identical
//! draws on every platform; generated datasets, model initialization, and
//! the checkpoint round-trip tests all rely on that.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tag for a random stream. The numeric values are part of the
/// reproducibility contract: changing them changes every seeded artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    /// Cluster profiles and per-column dictionaries of the synthetic generator.
    GeneratorProfiles = 1,
    /// Per-event draws of the synthetic generator.
    GeneratorEvents = 2,
    /// Uniform datasets for the random-reconstruction metric.
    MetricsRandom = 3,
    /// Model parameter initialization.
    ModelInit = 4,
    /// Random Fourier feature draws.
    Rff = 5,
    /// Auction catalogs and user contexts.
    Auction = 6,
}

/// RNG for `(seed, stream, index)`. `index` separates repeated uses of the
/// same stream, e.g. one random evaluation dataset per interval.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) ^ index);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_triple_same_draws() {
        let a: Vec<u64> = stream_rng(7, Stream::ModelInit, 0)
            .random_iter()
            .take(8)
            .collect();
        let b: Vec<u64> = stream_rng(7, Stream::ModelInit, 0)
            .random_iter()
            .take(8)
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn streams_are_distinct() {
        let a: u64 = stream_rng(7, Stream::ModelInit, 0).random();
        let b: u64 = stream_rng(7, Stream::Rff, 0).random();
        let c: u64 = stream_rng(7, Stream::ModelInit, 1).random();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
