//! The base distribution `U` over selection vectors, shared by the sampler
//! and the enumeration oracle so both see exactly the same measure.
//!
//! A draw picks `k` uniformly from `1..=m-1`, then a uniform `k`-subset of
//! chunks. The all-zero and all-one masks have probability zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chunking::SelectionVector;

/// Generator for sample `index` under `seed`.
///
/// Counter-based: the seed picks the key and the index picks the stream, so
/// any sample can be regenerated without replaying earlier ones.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StratifiedUniform {
    m: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("{0} chunk(s): at least 2 are needed to exclude both degenerate masks")]
pub struct TooFewChunks(pub usize);

impl StratifiedUniform {
    pub fn new(m: usize) -> Result<Self, TooFewChunks> {
        if m < 2 {
            return Err(TooFewChunks(m));
        }
        Ok(Self { m })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> SelectionVector {
        let k = rng.random_range(1..self.m);
        let chosen = rand::seq::index::sample(rng, self.m, k);
        SelectionVector::from_indices(self.m, chosen.iter())
    }

    /// Deterministic draw for `(seed, index)`.
    pub fn sample(&self, seed: u64, index: u64) -> SelectionVector {
        self.sample_with(&mut sample_rng(seed, index))
    }

    /// `P_U(s)` for a selection with `k` retained chunks.
    pub fn probability_of_count(&self, k: usize) -> f64 {
        if k == 0 || k >= self.m {
            return 0.0;
        }
        1.0 / ((self.m - 1) as f64 * binomial(self.m, k))
    }

    pub fn probability(&self, s: &SelectionVector) -> f64 {
        assert_eq!(s.len(), self.m, "selection length");
        self.probability_of_count(s.retained_count())
    }
}

/// `C(n, k)` as a float, exact for every value below 2^53.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as f64
}
