use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Matrix;
use crate::error::{Error, Result};

/// Seeded, splittable random stream.
///
/// Every stream is a ChaCha8 keystream selected by `(seed, stream id)`;
/// [`Rng::stream`] derives the id from a path of labels such as
/// `[worker, epoch, batch]`, so any point of a distributed run can address
/// its randomness directly without replaying what came before.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
        }
    }

    /// Stream addressed by `path` under `seed`.
    pub fn stream(seed: u64, path: &[u64]) -> Self {
        let id = path.iter().fold(0x5eed_u64, |acc, &p| mix(acc ^ mix(p)));
        Self::with_stream(seed, id)
    }

    /// Child stream of this one, independent of the parent's position.
    pub fn split(&self, label: u64) -> Self {
        Self::with_stream(self.seed, mix(self.stream ^ mix(label)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn gaussian(&mut self, mean: f64, std_dev: f64) -> f64 {
        Normal::new(mean, std_dev)
            .expect("finite non-negative standard deviation")
            .sample(&mut self.inner)
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, std_dev: f64) -> Matrix {
        let normal = Normal::new(0.0, std_dev).expect("finite non-negative standard deviation");
        let data = (0..rows * cols)
            .map(|_| normal.sample(&mut self.inner))
            .collect();
        Matrix::from_vec(rows, cols, data).expect("length matches")
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `{0,1}` matrix whose entries are independently 1 with probability `keep_prob`.
    pub fn bernoulli_matrix(&mut self, rows: usize, cols: usize, keep_prob: f64) -> Result<Matrix> {
        bernoulli_matrix(self, rows, cols, keep_prob)
    }

    /// Samples each entry of `probs` as a Bernoulli trial.
    pub fn sample_binary(&mut self, probs: &Matrix) -> Matrix {
        let mut out = probs.clone();
        for x in out.as_mut_slice() {
            *x = if self.uniform() < *x { 1.0 } else { 0.0 };
        }
        out
    }
}

/// `{0,1}` matrix whose entries are independently 1 with probability `keep_prob`.
pub fn bernoulli_matrix(rng: &mut Rng, rows: usize, cols: usize, keep_prob: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(Error::Domain(format!(
            "keep probability {keep_prob} outside [0, 1]"
        )));
    }
    let data = (0..rows * cols)
        .map(|_| if rng.uniform() < keep_prob { 1.0 } else { 0.0 })
        .collect();
    Ok(Matrix::from_vec(rows, cols, data).expect("length matches"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_keep_probabilities() {
        let mut rng = Rng::new(1);
        assert!(rng.bernoulli_matrix(10, 10, 1.0).unwrap().as_slice().iter().all(|&x| x == 1.0));
        assert!(rng.bernoulli_matrix(10, 10, 0.0).unwrap().as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn half_keep_fraction_concentrates() {
        let mut rng = Rng::new(2024);
        let m = rng.bernoulli_matrix(100, 100, 0.5).unwrap();
        let frac = m.sum() / 10_000.0;
        // 4 standard deviations of a Binomial(10000, 0.5) fraction.
        assert!((frac - 0.5).abs() <= 4.0 * 0.005, "fraction {frac}");
        assert!(m.as_slice().iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn keep_probability_out_of_range() {
        let mut rng = Rng::new(0);
        assert!(matches!(rng.bernoulli_matrix(2, 2, 1.5), Err(Error::Domain(_))));
        assert!(matches!(rng.bernoulli_matrix(2, 2, -0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn equal_seeds_give_equal_masks() {
        let a = Rng::stream(9, &[1, 2, 3]).bernoulli_matrix(20, 30, 0.3).unwrap();
        let b = Rng::stream(9, &[1, 2, 3]).bernoulli_matrix(20, 30, 0.3).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn streams_are_distinct() {
        let mut a = Rng::stream(9, &[0, 0, 1]);
        let mut b = Rng::stream(9, &[0, 1, 0]);
        let mut c = Rng::stream(10, &[0, 0, 1]);
        let xa: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..4).map(|_| c.next_u64()).collect();
        assert_ne!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn split_ignores_parent_position() {
        let parent = Rng::new(77);
        let mut advanced = parent.clone();
        advanced.next_u64();
        assert_eq!(parent.split(4).next_u64(), advanced.split(4).next_u64());
    }

    #[test]
    fn known_first_draws_are_stable() {
        // Pinned so that a dependency bump that changes the stream is noticed.
        let mut rng = Rng::stream(42, &[0, 0, 0]);
        assert_eq!(rng.next_u64(), 12_600_824_054_264_845_131);
    }
}
