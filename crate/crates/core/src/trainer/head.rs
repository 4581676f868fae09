use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FsacError, Result};
use crate::matrix::{axpy, norm, Matrix};

/// Linear map followed by L2 normalization: `f(x) = (Wx + b) / |Wx + b|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingHead {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl EmbeddingHead {
    pub fn identity(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Matrix::identity_truncated(d_out, d_in),
            bias: vec![0.0; d_out],
        }
    }

    /// Truncated identity plus seeded Gaussian noise of std `noise` on the weights.
    pub fn init(d_in: usize, d_out: usize, noise: f64, seed: u64) -> Result<Self> {
        if d_out == 0 || d_out > d_in {
            return Err(FsacError::invalid(
                "embedding_dim",
                format!("output dimension {d_out} must lie in 1..={d_in}"),
            ));
        }
        let mut head = Self::identity(d_in, d_out);
        if noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for w in head.weight.as_mut_slice() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w += noise * z;
            }
        }
        Ok(head)
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    /// Pre-normalization output `Wx + b`.
    pub fn affine(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.weight.mul_vec(x);
        axpy(1.0, &self.bias, &mut z);
        z
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in() {
            return Err(FsacError::DimensionMismatch {
                expected: self.d_in(),
                found: x.len(),
                context: Some("head input".into()),
            });
        }
        let mut z = self.affine(x);
        let r = norm(&z);
        if r == 0.0 || !r.is_finite() {
            return Err(FsacError::ZeroNorm(0));
        }
        z.iter_mut().for_each(|v| *v /= r);
        Ok(z)
    }

    /// Forward pass over every row; errors name the offending row.
    pub fn forward_all(&self, inputs: &Matrix) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = (0..inputs.rows())
            .into_par_iter()
            .map(|i| {
                self.forward(inputs.row(i)).map_err(|e| match e {
                    FsacError::ZeroNorm(_) => FsacError::ZeroNorm(i),
                    other => other,
                })
            })
            .collect::<Result<_>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.d_out()));
        }
        Matrix::from_rows(&rows)
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

/// Linear classifier over the pseudo-label space; logits are `C f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub weight: Matrix,
}

impl Classifier {
    /// One row per class, set to the normalized mean feature of that class
    /// times `scale`. Classes without members get a zero row.
    pub fn from_centroids(features: &Matrix, labels: &[Option<usize>], n_classes: usize, scale: f64) -> Self {
        let mut weight = Matrix::zeros(n_classes, features.cols());
        for (i, l) in labels.iter().enumerate() {
            if let Some(c) = l {
                axpy(1.0, features.row(i), weight.row_mut(*c));
            }
        }
        for c in 0..n_classes {
            let row = weight.row_mut(c);
            let n = norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v *= scale / n);
            }
        }
        Self { weight }
    }

    pub fn n_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        self.weight.mul_vec(feature)
    }
}
