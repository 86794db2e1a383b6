//! Reproducible, splittable random streams.
//!
//! A [`RngStream`] names a ChaCha8 keystream by `(seed, stream)`. Child
//! streams are derived by hashing a key into the stream id, so work that is
//! keyed by branch index draws the same noise no matter which thread runs it
//! or in which order branches are visited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Deterministic child stream; distinct keys give independent streams.
    pub fn child(&self, key: u64) -> Self {
        Self {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(key.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    pub fn child2(&self, a: u64, b: u64) -> Self {
        self.child(a).child(b)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// `n` i.i.d. standard normal draws from the start of this stream.
    pub fn standard_normals(&self, n: usize) -> Vec<f64> {
        let mut rng = self.rng();
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}
