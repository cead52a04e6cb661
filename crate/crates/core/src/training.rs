//! Maximum-likelihood training by backpropagating through the reverse
//! Taylor-Verlet integrator.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Eager, Layer, Matrix, Tape, Var};
use crate::densities::{source_log_density, Gmm};
use crate::error::{FlowError, Result};
use crate::flow::{BoundFlow, LinearForm, VerletFlow};
use crate::integrators::{verlet_core, IntegratorConfig, Method};
use crate::rng::{self, Purpose};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Optimizer steps per epoch, each on a freshly drawn batch.
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Integration steps used by the loss.
    pub steps: usize,
    pub seed: u64,
    pub hidden_sizes: Vec<usize>,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batches_per_epoch: 1,
            batch_size: 256,
            learning_rate: 1e-3,
            steps: 20,
            seed: 0,
            hidden_sizes: vec![64, 64, 64],
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batches_per_epoch == 0 || self.batch_size == 0 || self.steps == 0 {
            return Err(FlowError::Config(
                "batches_per_epoch, batch_size and steps must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(FlowError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(FlowError::Config("hidden_sizes must be nonempty and positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Mean negative log-likelihood of `(q, p)` at t = 1 in any backend.
///
/// The batch is integrated back to t = 0; the inverse sub-steps accumulate
/// `+log|det|` of the forward map, so
/// `−log π(x₁) = −log π₀(x₀) + Δ_reverse`.
pub fn nll_with<B: Backend>(bound: &BoundFlow<'_, B>, q: &Matrix, p: &Matrix, steps: usize) -> Result<B::T> {
    if q.nrows() == 0 {
        return Err(FlowError::Contract("nll of an empty batch".into()));
    }
    let b = bound.backend;
    let cfg = IntegratorConfig::reverse(steps, Method::TaylorVerlet);
    cfg.validate()?;
    let rows = q.nrows();
    let zero = b.constant(Matrix::zeros((rows, 1)));
    let (q0, p0, dlogp) = verlet_core(bound, b.constant(q.clone()), b.constant(p.clone()), zero, &cfg)?;
    let per_row = b.sub(&dlogp, &source_log_density(b, &q0, &p0));
    Ok(b.scale(&b.sum(&per_row), 1.0 / rows as f64))
}

/// Loss in inference mode (no tape).
pub fn nll_value(flow: &VerletFlow, q: &Matrix, p: &Matrix, steps: usize) -> Result<f64> {
    let m = nll_with(&BoundFlow::eager(flow), q, p, steps)?;
    Ok(Eager.inspect(&m, |v| v[[0, 0]]))
}

/// A recorded loss with its parameter leaves.
pub struct TapedLoss {
    pub tape: Tape,
    pub loss: Var,
    pub params: Vec<Vec<Layer<Var>>>,
}

impl TapedLoss {
    pub fn value(&self) -> f64 {
        self.tape.scalar(self.loss)
    }

    /// Gradient of `output` (a scalar on this tape) in checkpoint order.
    pub fn gradient_of(&self, output: Var) -> Result<Vec<f64>> {
        let grads = self.tape.backward(output)?;
        let mut flat = Vec::new();
        for net in &self.params {
            for layer in net {
                flat.extend(grads.wrt(layer.weight).iter());
                flat.extend(grads.wrt(layer.bias).iter());
            }
        }
        Ok(flat)
    }

    pub fn gradient(&self) -> Result<Vec<f64>> {
        self.gradient_of(self.loss)
    }
}

/// Records the loss with every flow parameter as a trainable leaf.
pub fn nll_batch(flow: &VerletFlow, q: &Matrix, p: &Matrix, steps: usize) -> Result<TapedLoss> {
    let tape = Tape::new();
    let params = flow.record(&tape, true);
    let loss = {
        let bound = BoundFlow::taped(&tape, flow, &params);
        nll_with(&bound, q, p, steps)?
    };
    Ok(TapedLoss { tape, loss, params })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_nll: Vec<f64>,
    pub wall_time: f64,
    pub skipped_batches: usize,
    /// Epoch at which the loss became non-finite; the returned flow is the
    /// last one with a finite loss.
    pub diverged_at: Option<usize>,
}

impl TrainReport {
    pub fn check(&self) -> Result<()> {
        match self.diverged_at {
            Some(epoch) => Err(FlowError::Diverged { epoch }),
            None => Ok(()),
        }
    }
}

/// Freshly initialized flow for `cfg`, seeded from the init stream.
pub fn init_flow(dq: usize, dp: usize, order: usize, linear: LinearForm, cfg: &TrainConfig) -> Result<VerletFlow> {
    if linear == LinearForm::Dense {
        return Err(FlowError::Unsupported(
            "dense order-1 coefficients are inference-only".into(),
        ));
    }
    let mut rng = rng::stream(cfg.seed, Purpose::Init, 0);
    VerletFlow::new(dq, dp, order, &cfg.hidden_sizes, linear, &mut rng)
}

/// Training batch `index`: target q-samples and fresh standard-normal p.
pub fn training_batch(target: &Gmm, dp: usize, batch_size: usize, seed: u64, index: u64) -> (Matrix, Matrix) {
    let q = target.sample(batch_size, &mut rng::stream(seed, Purpose::Target, index));
    let p = Gmm::standard_normal(dp).sample(batch_size, &mut rng::stream(seed, Purpose::Momentum, index));
    (q, p)
}

/// Trains `flow` in place with Adam on the negative log-likelihood of
/// `target`, augmented with standard-normal momenta.
pub fn train(flow: &mut VerletFlow, target: &Gmm, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(flow, target, cfg, |_, _| {})
}

/// [`train`] with a callback receiving `(epoch, mean nll)`.
pub fn train_with(
    flow: &mut VerletFlow,
    target: &Gmm,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    let (dq, dp) = flow.dims();
    if target.dim() != dq {
        return Err(FlowError::Shape(format!(
            "target has dimension {}, flow has d_q = {dq}",
            target.dim()
        )));
    }
    if flow.linear_form() == LinearForm::Dense {
        return Err(FlowError::Unsupported(
            "dense order-1 coefficients are inference-only".into(),
        ));
    }
    let start = Instant::now();
    let mut params = flow.params();
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut report = TrainReport {
        epoch_nll: Vec::with_capacity(cfg.epochs),
        wall_time: 0.0,
        skipped_batches: 0,
        diverged_at: None,
    };

    'epochs: for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut used = 0usize;
        for b in 0..cfg.batches_per_epoch {
            let index = (epoch * cfg.batches_per_epoch + b) as u64;
            let (q, p) = training_batch(target, dp, cfg.batch_size, cfg.seed, index);
            let taped = match nll_batch(flow, &q, &p, cfg.steps) {
                Ok(t) => t,
                Err(FlowError::Singularity { .. }) => {
                    report.skipped_batches += 1;
                    continue;
                }
                Err(e) if e.is_numeric() => {
                    report.diverged_at = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let loss = taped.value();
            let grad = taped.gradient()?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                report.diverged_at = Some(epoch);
                break 'epochs;
            }
            adam.step(&mut params, &grad);
            flow.set_params(&params)?;
            total += loss;
            used += 1;
        }
        if used == 0 {
            report.diverged_at = Some(epoch);
            break;
        }
        let mean = total / used as f64;
        report.epoch_nll.push(mean);
        on_epoch(epoch, mean);
    }
    report.wall_time = start.elapsed().as_secs_f64();
    Ok(report)
}
