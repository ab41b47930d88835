//! Random Fourier features: a fixed random cosine map approximating the
//! Gaussian RBF kernel. The projection is drawn once, never trained, and
//! persisted inside checkpoints so scores stay bit-reproducible.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct RffTransform {
    projection: Matrix,
    phases: Vec<f64>,
    sigma: f64,
    seed: u64,
}

impl RffTransform {
    /// Projection entries are i.i.d. `Normal(0, 1/sigma^2)`, phases i.i.d.
    /// uniform on `[0, 2π)`. `sigma` is the RBF bandwidth.
    pub fn init(code_dim: usize, feature_dim: usize, sigma: f64, seed: u64) -> Result<Self> {
        if code_dim == 0 || feature_dim == 0 {
            return Err(Error::Config("RFF dimensions must be positive".into()));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Config(format!("RFF bandwidth must be positive, got {sigma}")));
        }
        let mut rng = stream_rng(seed, Stream::Rff, 0);
        let data = (0..feature_dim * code_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) / sigma)
            .collect();
        let projection = Matrix::from_vec(feature_dim, code_dim, data);
        let phases = (0..feature_dim)
            .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
            .collect();
        Ok(RffTransform {
            projection,
            phases,
            sigma,
            seed,
        })
    }

    pub fn from_parts(projection: Matrix, phases: Vec<f64>, sigma: f64, seed: u64) -> Self {
        assert_eq!(projection.rows(), phases.len(), "phase/projection mismatch");
        RffTransform {
            projection,
            phases,
            sigma,
            seed,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn code_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    /// `cos(P·code + q)` componentwise. No amplitude normalization: the
    /// learned weight vector downstream absorbs the scale.
    pub fn transform(&self, code: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.feature_dim()];
        self.projection.matvec_into(code, &mut out);
        for (o, q) in out.iter_mut().zip(&self.phases) {
            *o = (*o + q).cos();
        }
        out
    }
}
