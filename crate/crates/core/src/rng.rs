//! Deterministic random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the 64-bit run seed. Parallel
//! consumers do not share a generator; instead each independent unit of work
//! (one ray of one energy bin for noise synthesis) owns the stream selected by
//! its stream id, `bin · num_rays + ray`. ChaCha is counter based, so a stream
//! is a pure function of `(seed, stream id)` and results do not depend on how
//! work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Stream 0 of the given seed.
pub fn seeded_rng(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the given seed.
pub fn stream_rng(seed: u64, stream: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Poisson};

    fn draws(mut rng: Stream, n: usize) -> Vec<u64> {
        (0..n).map(|_| rng.random()).collect()
    }

    #[test]
    fn same_seed_same_stream() {
        assert_eq!(draws(seeded_rng(0), 100), draws(seeded_rng(0), 100));
        assert_eq!(draws(stream_rng(7, 3), 100), draws(stream_rng(7, 3), 100));
    }

    #[test]
    fn seeds_and_streams_differ() {
        assert_ne!(draws(seeded_rng(0), 100), draws(seeded_rng(1), 100));
        assert_ne!(draws(stream_rng(0, 0), 100), draws(stream_rng(0, 1), 100));
        assert_eq!(draws(stream_rng(5, 0), 10), draws(seeded_rng(5), 10));
    }

    #[test]
    fn poisson_mean_law_of_large_numbers() {
        let mut rng = seeded_rng(0);
        let dist = Poisson::new(5000.0).unwrap();
        let n = 100_000;
        let mean = (0..n).map(|_| dist.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 5000.0).abs() / 5000.0 < 0.01, "mean {mean}");
    }
}
