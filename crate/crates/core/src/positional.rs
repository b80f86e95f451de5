//! Fourier-feature dense positional encoding (DPE) over the semantic patch grid.
//!
//! The frequency matrix is shared with the mask decoder so that sampled
//! encodings land in the coordinate space the decoder already understands.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Random Fourier frequency matrix `B` of shape `2 × F`; encodings are `2F` wide.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyMatrix(Array2<f64>);

impl FrequencyMatrix {
    pub fn new(b: Array2<f64>) -> Result<Self> {
        if b.nrows() != 2 {
            return Err(Error::shape("frequency matrix rows", 2, b.nrows()));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("frequency matrix has non-finite entries".into()));
        }
        Ok(Self(b))
    }

    /// I.i.d. standard-normal entries drawn from `seed`.
    pub fn from_seed(seed: u64, features: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self(Array2::from_shape_fn((2, features), |_| StandardNormal.sample(&mut rng)))
    }

    pub fn zeros(features: usize) -> Self {
        Self(Array2::zeros((2, features)))
    }

    pub fn features(&self) -> usize {
        self.0.ncols()
    }

    /// Width of the encodings produced with this matrix.
    pub fn encoding_dim(&self) -> usize {
        2 * self.0.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Encodes normalized `(x, y) ∈ [0,1]²` as `[sin(2π·Bᵀc) | cos(2π·Bᵀc)]` with `c = 2·(x,y) − 1`.
pub fn encode_coords(x: f64, y: f64, freq: &FrequencyMatrix) -> Result<Array1<f64>> {
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return Err(Error::InvalidArgument(format!(
            "coordinates ({x}, {y}) outside the unit square"
        )));
    }
    Ok(encode_unchecked(x, y, freq))
}

fn encode_unchecked(x: f64, y: f64, freq: &FrequencyMatrix) -> Array1<f64> {
    let (cx, cy) = (2.0 * x - 1.0, 2.0 * y - 1.0);
    let b = freq.matrix();
    let f = freq.features();
    let mut out = Array1::zeros(2 * f);
    for k in 0..f {
        let angle = 2.0 * PI * (cx * b[[0, k]] + cy * b[[1, k]]);
        out[k] = angle.sin();
        out[f + k] = angle.cos();
    }
    out
}

/// Positional encodings of every patch centre of an `h × w` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DpeGrid {
    h: usize,
    w: usize,
    vectors: Array2<f64>,
}

impl DpeGrid {
    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// `(h·w) × dim` matrix; row `i·w + j` is cell `(i, j)`.
    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn cell(&self, i: usize, j: usize) -> ndarray::ArrayView1<'_, f64> {
        self.vectors.row(i * self.w + j)
    }
}

/// Encodes cell `(i, j)` at its centre `((j + 0.5)/w, (i + 0.5)/h)`.
pub fn build_grid(h: usize, w: usize, freq: &FrequencyMatrix) -> Result<DpeGrid> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("grid size {h}x{w} must be positive")));
    }
    let dim = freq.encoding_dim();
    let mut vectors = Array2::zeros((h * w, dim));
    for i in 0..h {
        for j in 0..w {
            let v = encode_unchecked((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64, freq);
            vectors.row_mut(i * w + j).assign(&v);
        }
    }
    Ok(DpeGrid { h, w, vectors })
}
