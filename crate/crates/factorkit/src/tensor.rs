//! Dense rank-4 tensor of 32-bit floats, row-major in (batch, channels,
//! height, width) order.

use crate::graph::Shape;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn filled(dims: [usize; 4], value: f32) -> Self {
        Tensor { dims, data: vec![value; dims.iter().product()] }
    }

    /// Builds a tensor from raw data; panics if the length does not match
    /// the dimensions (programmer error, not input error).
    pub fn from_vec(dims: [usize; 4], data: Vec<f32>) -> Self {
        assert_eq!(
            data.len(),
            dims.iter().product::<usize>(),
            "tensor data length {} does not match dims {:?}",
            data.len(),
            dims
        );
        Tensor { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    /// Per-item shape without the batch dimension.
    pub fn shape(&self) -> Shape {
        Shape::new(self.dims[1], self.dims[2], self.dims[3])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(b, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, h: usize, w: usize) -> &mut f32 {
        let i = self.index(b, c, h, w);
        &mut self.data[i]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f32> {
        self.data.iter()
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Deterministic uniform random tensor; same (dims, range, seed) always
/// yields the same bits.
pub fn random_uniform(dims: [usize; 4], lo: f32, hi: f32, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}x{}x{}]", self.dims[0], self.dims[1], self.dims[2], self.dims[3])
    }
}
