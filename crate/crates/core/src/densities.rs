//! Isotropic Gaussians, Gaussian mixtures, their phase-space augmentation
//! and unnormalized variants with a known partition constant.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Matrix};
use crate::error::{FlowError, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

impl Component {
    fn log_density(&self, x: ArrayView1<'_, f64>) -> f64 {
        let d = self.mean.len() as f64;
        let sq: f64 = x.iter().zip(&self.mean).map(|(a, m)| (a - m) * (a - m)).sum();
        -0.5 * sq / self.variance - 0.5 * d * (2.0 * PI * self.variance).ln()
    }

    fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let sd = self.variance.sqrt();
        rng::standard_normal(rng, self.mean.len())
            .into_iter()
            .zip(&self.mean)
            .map(|(z, m)| m + sd * z)
            .collect()
    }
}

/// Mixture of isotropic Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gmm {
    pub components: Vec<Component>,
}

impl Gmm {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let g = Self { components };
        g.validate()?;
        Ok(g)
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::gaussian(vec![0.0; dim], 1.0)
    }

    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Self {
        Self {
            components: vec![Component {
                weight: 1.0,
                mean,
                variance,
            }],
        }
    }

    /// Equal-weight three-component mixture in the plane.
    pub fn trimodal() -> Self {
        let means = [[-2.5, -1.0], [2.5, -1.0], [0.0, 2.0]];
        Self {
            components: means
                .iter()
                .map(|m| Component {
                    weight: 1.0 / 3.0,
                    mean: m.to_vec(),
                    variance: 0.3,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .components
            .first()
            .ok_or_else(|| FlowError::Config("mixture has no components".into()))?;
        let d = first.mean.len();
        if d == 0 {
            return Err(FlowError::Config("mixture dimension must be positive".into()));
        }
        let mut total = 0.0;
        for c in &self.components {
            if c.mean.len() != d {
                return Err(FlowError::Config("mixture components differ in dimension".into()));
            }
            if !(c.weight > 0.0) || !(c.variance > 0.0) {
                return Err(FlowError::Config(
                    "mixture weights and variances must be positive".into(),
                ));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(FlowError::Config(format!("mixture weights sum to {total}")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for c in &self.components {
            for (a, b) in m.iter_mut().zip(&c.mean) {
                *a += c.weight * b;
            }
        }
        m
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.log_density_row(ArrayView1::from(x))
    }

    fn log_density_row(&self, x: ArrayView1<'_, f64>) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.weight.ln() + c.log_density(x))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn log_density_batch(&self, x: &Matrix) -> Array1<f64> {
        x.outer_iter().map(|r| self.log_density_row(r)).collect()
    }

    /// Draws one point; a single-component mixture consumes exactly the
    /// normal draws of a plain Gaussian.
    pub fn sample_one(&self, rng: &mut impl Rng) -> Vec<f64> {
        let component = if self.components.len() == 1 {
            &self.components[0]
        } else {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            self.components
                .iter()
                .find(|c| {
                    acc += c.weight;
                    u < acc
                })
                .unwrap_or_else(|| self.components.last().unwrap())
        };
        component.sample(rng)
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Matrix {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for mut row in out.outer_iter_mut() {
            row.assign(&Array1::from(self.sample_one(rng)));
        }
        out
    }

    /// Index of the most responsible component for `x`.
    pub fn assign(&self, x: &[f64]) -> usize {
        let xv = ArrayView1::from(x);
        self.components
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.weight.ln() + c.log_density(xv)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0
    }
}

/// Target on phase space: `π(q, p) = π(q)·N(p; 0, I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedDensity {
    pub q_density: Gmm,
    pub dp: usize,
}

impl AugmentedDensity {
    pub fn new(q_density: Gmm, dp: usize) -> Self {
        Self { q_density, dp }
    }

    /// The flow's source: standard normal on both sides.
    pub fn source(dq: usize, dp: usize) -> Self {
        Self::new(Gmm::standard_normal(dq), dp)
    }

    pub fn log_density(&self, q: &[f64], p: &[f64]) -> f64 {
        self.q_density.log_density(q) + standard_normal_log_density(p)
    }

    pub fn log_density_batch(&self, q: &Matrix, p: &Matrix) -> Array1<f64> {
        self.q_density.log_density_batch(q) + standard_normal_log_density_batch(p)
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> (Matrix, Matrix) {
        let q = self.q_density.sample(n, rng);
        let p = Gmm::standard_normal(self.dp).sample(n, rng);
        (q, p)
    }
}

/// A q-space density scaled by `exp(log_z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnnormalizedDensity {
    pub base: Gmm,
    pub log_z: f64,
}

impl UnnormalizedDensity {
    pub fn new(base: Gmm, log_z: f64) -> Self {
        Self { base, log_z }
    }

    pub fn log_density(&self, q: &[f64]) -> f64 {
        self.base.log_density(q) + self.log_z
    }

    pub fn log_density_batch(&self, q: &Matrix) -> Array1<f64> {
        self.base.log_density_batch(q) + self.log_z
    }

    /// `log π̂(q) + log N(p; 0, I)`, which integrates to the same `Z`.
    pub fn augmented_log_density_batch(&self, q: &Matrix, p: &Matrix) -> Array1<f64> {
        self.log_density_batch(q) + standard_normal_log_density_batch(p)
    }
}

pub fn standard_normal_log_density(x: &[f64]) -> f64 {
    let sq: f64 = x.iter().map(|v| v * v).sum();
    -0.5 * sq - 0.5 * x.len() as f64 * (2.0 * PI).ln()
}

pub fn standard_normal_log_density_batch(x: &Matrix) -> Array1<f64> {
    x.outer_iter()
        .map(|r| standard_normal_log_density(r.as_slice().unwrap_or(&r.to_vec())))
        .collect()
}

/// Row-wise standard-normal log-density of `[q | p]` in any backend (`B×1`).
pub fn source_log_density<B: Backend>(b: &B, q: &B::T, p: &B::T) -> B::T {
    let d = b.dims(q).1 + b.dims(p).1;
    let sq = b.add(&b.row_sum(&b.mul(q, q)), &b.row_sum(&b.mul(p, p)));
    b.add_scalar(&b.scale(&sq, -0.5), -0.5 * d as f64 * (2.0 * PI).ln())
}

/// Stable `log Σ exp(v_i)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Stable `log((1/n) Σ exp(v_i))`.
pub fn log_mean_exp(v: &[f64]) -> f64 {
    log_sum_exp(v) - (v.len() as f64).ln()
}
