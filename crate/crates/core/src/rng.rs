//! Counter-based random streams for reproducible parallel Monte Carlo.
//!
//! Every replicate draws from its own ChaCha stream keyed by
//! `(master_seed, experiment)` with the replicate index as the stream id, so
//! a replicate's draws never depend on which worker ran it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Identifies one independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamSeed {
    pub master: u64,
    pub experiment: u64,
    pub replicate: u64,
}

impl StreamSeed {
    pub fn new(master: u64, experiment: u64, replicate: u64) -> Self {
        StreamSeed {
            master,
            experiment,
            replicate,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.master.to_le_bytes());
        key[8..16].copy_from_slice(&self.experiment.to_le_bytes());
        // domain tag so the all-zero key is never used
        key[16..24].copy_from_slice(b"spca-rng");
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.replicate);
        rng
    }
}

impl From<u64> for StreamSeed {
    fn from(seed: u64) -> Self {
        StreamSeed::new(seed, 0, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn draw(seed: StreamSeed) -> Vec<u64> {
        let mut rng = seed.rng();
        (0..4).map(|_| rng.random()).collect()
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a = draw(StreamSeed::new(7, 1, 2));
        assert_eq!(a, draw(StreamSeed::new(7, 1, 2)));
        assert_ne!(a, draw(StreamSeed::new(7, 1, 3)));
        assert_ne!(a, draw(StreamSeed::new(7, 2, 2)));
        assert_ne!(a, draw(StreamSeed::new(8, 1, 2)));
    }
}
