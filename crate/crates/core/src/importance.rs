//! Importance-sampling estimates of log Z with the flow as proposal.
//!
//! Sample `i` draws its source point from its own stream, so a weight does
//! not depend on chunking, worker count or the integration method; only the
//! likelihood computation differs between methods.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::densities::{log_mean_exp, UnnormalizedDensity};
use crate::error::{FlowError, Result};
use crate::flow::{PhaseBatch, VerletFlow};
use crate::integrators::{integrate, rk4_with_probes, IntegratorConfig, Method};
use crate::rng::{self, Purpose};

/// Number of independent blocks behind each reported SD.
pub const SD_BLOCKS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateConfig {
    pub steps: usize,
    pub method: Method,
    pub hutchinson_probes: usize,
    pub seed: u64,
    /// Samples integrated together; fixed so results are reproducible.
    pub chunk: usize,
    pub workers: usize,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            method: Method::TaylorVerlet,
            hutchinson_probes: 1,
            seed: 0,
            chunk: 1000,
            workers: 1,
        }
    }
}

impl EstimateConfig {
    pub fn with_method(&self, method: Method) -> Self {
        Self {
            method,
            ..self.clone()
        }
    }

    fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig {
            hutchinson_probes: self.hutchinson_probes,
            seed: self.seed,
            ..IntegratorConfig::forward(self.steps, self.method)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.integrator().validate()?;
        if self.chunk == 0 || self.workers == 0 {
            return Err(FlowError::Config("chunk and workers must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub m: usize,
    pub log_z: f64,
    pub sd: f64,
    /// Likelihood time spent on the first `m` samples.
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub method: Method,
    pub seed: u64,
    /// Valid log-weights in sample order.
    pub log_weights: Vec<f64>,
    pub invalid_count: usize,
    pub curve: Vec<CurvePoint>,
    pub wall_time: f64,
    /// More than 1% of the weights were invalid.
    pub unreliable: bool,
}

impl WeightReport {
    pub fn log_z(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |c| c.log_z)
    }

    pub fn sd(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |c| c.sd)
    }

    pub fn max_log_weight(&self) -> f64 {
        self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Source draw for sample `index`: `(q₀, p₀) ~ N(0, I)`.
pub fn source_point(seed: u64, index: u64, dq: usize, dp: usize) -> (Vec<f64>, Vec<f64>) {
    let mut z = rng::standard_normal(&mut rng::stream(seed, Purpose::Source, index), dq + dp);
    let p = z.split_off(dq);
    (z, p)
}

pub fn source_batch(seed: u64, range: std::ops::Range<usize>, dq: usize, dp: usize) -> PhaseBatch {
    let n = range.len();
    let mut q = Array2::zeros((n, dq));
    let mut p = Array2::zeros((n, dp));
    for (r, i) in range.enumerate() {
        let (qi, pi) = source_point(seed, i as u64, dq, dp);
        q.row_mut(r).assign(&Array1::from(qi));
        p.row_mut(r).assign(&Array1::from(pi));
    }
    PhaseBatch::new(q, p, 0.0).expect("source batch shapes")
}

/// Forward samples of the flow with their model log-densities.
pub fn sample_model(flow: &VerletFlow, n: usize, cfg: &EstimateConfig) -> Result<(Matrix, Matrix, Array1<f64>)> {
    let (dq, dp) = flow.dims();
    let batch = source_batch(cfg.seed, 0..n, dq, dp);
    let base = source_log_densities(&batch);
    let out = integrate(flow, &batch, &cfg.integrator())?;
    let logp = base + out.dlogp();
    Ok((out.batch.q, out.batch.p, logp))
}

fn source_log_densities(batch: &PhaseBatch) -> Array1<f64> {
    crate::densities::standard_normal_log_density_batch(&batch.q)
        + crate::densities::standard_normal_log_density_batch(&batch.p)
}

/// Log importance weights for a batch whose first row is sample `first`.
fn batch_log_weights(
    flow: &VerletFlow,
    target: &UnnormalizedDensity,
    batch: &PhaseBatch,
    first: usize,
    cfg: &EstimateConfig,
) -> Result<Vec<f64>> {
    let icfg = cfg.integrator();
    let out = match cfg.method {
        Method::TaylorVerlet => integrate(flow, batch, &icfg)?,
        Method::Rk4Exact | Method::Rk4Hutchinson => {
            let mut probes: Vec<ChaCha8Rng> = (first..first + batch.len())
                .map(|i| rng::stream(cfg.seed, Purpose::Probe, i as u64))
                .collect();
            rk4_with_probes(flow, batch, &icfg, &mut probes)?
        }
    };
    let log_model = source_log_densities(batch) + out.dlogp();
    let log_target = target.augmented_log_density_batch(&out.batch.q, &out.batch.p);
    Ok((log_target - log_model).to_vec())
}

/// Log-weights for samples `range` (invalid ones are `None`) and the
/// likelihood time spent.
fn chunk_log_weights(
    flow: &VerletFlow,
    target: &UnnormalizedDensity,
    range: std::ops::Range<usize>,
    cfg: &EstimateConfig,
) -> (Vec<Option<f64>>, f64) {
    let (dq, dp) = flow.dims();
    let batch = source_batch(cfg.seed, range.clone(), dq, dp);
    let start = Instant::now();
    let weights: Vec<Option<f64>> = match batch_log_weights(flow, target, &batch, range.start, cfg) {
        Ok(w) => w.into_iter().map(Some).collect(),
        // a failing row poisons its chunk; redo the chunk row by row
        Err(_) => range
            .clone()
            .map(|i| {
                let one = source_batch(cfg.seed, i..i + 1, dq, dp);
                batch_log_weights(flow, target, &one, i, cfg).ok().map(|w| w[0])
            })
            .collect(),
    };
    let elapsed = start.elapsed().as_secs_f64();
    let weights = weights
        .into_iter()
        .map(|w| w.filter(|v| v.is_finite()))
        .collect();
    (weights, elapsed)
}

/// Log importance weight of a single sample; `Err` when its integration
/// fails or the weight is not finite.
pub fn log_weight(
    flow: &VerletFlow,
    target: &UnnormalizedDensity,
    index: usize,
    cfg: &EstimateConfig,
) -> Result<f64> {
    check_dims(flow, target)?;
    let (dq, dp) = flow.dims();
    let one = source_batch(cfg.seed, index..index + 1, dq, dp);
    let w = batch_log_weights(flow, target, &one, index, cfg)?[0];
    if w.is_finite() {
        Ok(w)
    } else {
        Err(FlowError::NonFinite {
            side: crate::error::Side::Q,
            order: 0,
            step: None,
        })
    }
}

fn check_dims(flow: &VerletFlow, target: &UnnormalizedDensity) -> Result<()> {
    if flow.dims().0 != target.base.dim() {
        return Err(FlowError::Shape(format!(
            "target has dimension {}, flow has d_q = {}",
            target.base.dim(),
            flow.dims().0
        )));
    }
    Ok(())
}

/// Sample counts at which the curve is reported: 10, 100, ... and `n`.
pub fn curve_points(n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut m = 10;
    while m < n {
        out.push(m);
        m = m.saturating_mul(10);
    }
    out.push(n);
    out
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// SD of the log Z estimate from `m` samples.
///
/// The weights are cut into [`SD_BLOCKS`] disjoint blocks of length `L`.
/// For `m ≤ L` the SD is taken over the blocks' own `m`-sample estimates;
/// for larger `m` the full-block SD is scaled by `√(L/m)`.
pub fn estimate_sd(log_weights: &[f64], m: usize) -> f64 {
    let n = log_weights.len();
    let blocks = SD_BLOCKS.min(n);
    if blocks < 2 {
        return f64::NAN;
    }
    let len = n / blocks;
    let take = m.min(len);
    let estimates: Vec<f64> = (0..blocks)
        .map(|j| log_mean_exp(&log_weights[j * len..j * len + take]))
        .collect();
    let sd = sample_sd(&estimates);
    if sd == 0.0 || m <= len {
        sd
    } else {
        sd * (len as f64 / m as f64).sqrt()
    }
}

/// Estimates log Z from `n` samples.
pub fn estimate_log_z(
    flow: &VerletFlow,
    target: &UnnormalizedDensity,
    n: usize,
    cfg: &EstimateConfig,
) -> Result<WeightReport> {
    if n < 2 {
        return Err(FlowError::Config("log Z estimation needs at least two samples".into()));
    }
    cfg.validate()?;
    check_dims(flow, target)?;
    let chunks: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(cfg.chunk)
        .map(|a| a..(a + cfg.chunk).min(n))
        .collect();
    let work = |r: &std::ops::Range<usize>| chunk_log_weights(flow, target, r.clone(), cfg);
    let results: Vec<(Vec<Option<f64>>, f64)> = if cfg.workers == 1 {
        chunks.iter().map(work).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| FlowError::Config(e.to_string()))?
            .install(|| chunks.par_iter().map(work).collect())
    };

    // cumulative likelihood time after each valid sample
    let mut log_weights = Vec::with_capacity(n);
    let mut elapsed = Vec::with_capacity(n);
    let mut invalid_count = 0;
    let mut clock = 0.0;
    for (weights, secs) in &results {
        let per = secs / weights.len() as f64;
        for w in weights {
            clock += per;
            match w {
                Some(v) => {
                    log_weights.push(*v);
                    elapsed.push(clock);
                }
                None => invalid_count += 1,
            }
        }
    }
    let wall_time = clock;
    let valid = log_weights.len();
    let curve = curve_points(valid)
        .into_iter()
        .filter(|&m| m > 0)
        .map(|m| CurvePoint {
            m,
            log_z: log_mean_exp(&log_weights[..m]),
            sd: estimate_sd(&log_weights, m),
            wall_ms: 1e3 * elapsed[m - 1],
        })
        .collect();
    Ok(WeightReport {
        method: cfg.method,
        seed: cfg.seed,
        log_weights,
        invalid_count,
        curve,
        wall_time,
        unreliable: invalid_count * 100 > n,
    })
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub reports: Vec<WeightReport>,
    pub warnings: Vec<String>,
}

/// Runs [`estimate_log_z`] for each distinct method on identical seeds.
pub fn benchmark(
    flow: &VerletFlow,
    target: &UnnormalizedDensity,
    n: usize,
    methods: &[Method],
    cfg: &EstimateConfig,
) -> Result<Benchmark> {
    let mut distinct: Vec<Method> = Vec::new();
    let mut warnings = Vec::new();
    for &m in methods {
        if distinct.contains(&m) {
            warnings.push(format!("duplicate method {m} ignored"));
        } else {
            distinct.push(m);
        }
    }
    if distinct.len() < 2 {
        return Err(FlowError::Config(format!(
            "benchmark needs at least two distinct methods, got {}",
            distinct.len()
        )));
    }
    let reports = distinct
        .into_iter()
        .map(|m| estimate_log_z(flow, target, n, &cfg.with_method(m)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Benchmark { reports, warnings })
}
