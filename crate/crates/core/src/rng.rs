use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;

/// Seeded generator with a platform-independent stream.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream, e.g. one per dataset or per sweep cell.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.inner.random())
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        self.inner.random_range(low..high)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], low: f64, high: f64) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| self.uniform(low, high)).collect();
        Tensor::new(shape, data).expect("shape")
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| std * self.normal()).collect();
        Tensor::new(shape, data).expect("shape")
    }
}
