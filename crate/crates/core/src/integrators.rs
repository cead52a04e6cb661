//! Taylor-Verlet integration and the RK4 continuous-likelihood baseline.
//!
//! A Taylor-Verlet step of an order-N flow applies, for `k = 0..=N`, the
//! closed-form q-update of term k followed by the p-update of term k, with
//! `t` frozen for the whole step; each coefficient is evaluated on the
//! current value of the opposite variable. Integrating with `t1 < t0` runs
//! the exact inverse: steps in reverse, and within a step p before q with k
//! descending.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Matrix, Tape};
use crate::error::{FlowError, Result, Side};
use crate::flow::{BoundFlow, PhaseBatch, PhaseState, VerletFlow};
use crate::operators;
use crate::rng::{self, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    TaylorVerlet,
    Rk4Exact,
    Rk4Hutchinson,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::TaylorVerlet, Method::Rk4Exact, Method::Rk4Hutchinson];

    pub fn name(self) -> &'static str {
        match self {
            Method::TaylorVerlet => "taylor-verlet",
            Method::Rk4Exact => "rk4-exact",
            Method::Rk4Hutchinson => "rk4-hutchinson",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| FlowError::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
    pub method: Method,
    #[serde(default = "one")]
    pub hutchinson_probes: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl IntegratorConfig {
    /// Integration from t = 0 to t = 1.
    pub fn forward(steps: usize, method: Method) -> Self {
        Self {
            t0: 0.0,
            t1: 1.0,
            steps,
            method,
            hutchinson_probes: 1,
            seed: 0,
        }
    }

    /// Integration from t = 1 back to t = 0.
    pub fn reverse(steps: usize, method: Method) -> Self {
        Self {
            t0: 1.0,
            t1: 0.0,
            ..Self::forward(steps, method)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn tau(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.t0) || !unit.contains(&self.t1) {
            return Err(FlowError::Config(format!(
                "integration bounds ({}, {}) must lie in [0, 1]",
                self.t0, self.t1
            )));
        }
        if self.t0 == self.t1 {
            return Err(FlowError::Config("t0 and t1 must differ".into()));
        }
        if self.steps == 0 {
            return Err(FlowError::Config("steps must be positive".into()));
        }
        if self.hutchinson_probes == 0 {
            return Err(FlowError::Config("hutchinson_probes must be positive".into()));
        }
        let tau = self.tau();
        if !tau.is_finite() || tau == 0.0 {
            return Err(FlowError::Config(format!("step size {tau} is degenerate")));
        }
        Ok(())
    }

    /// Time at which step `j` evaluates its coefficients.
    fn step_time(&self, j: usize) -> f64 {
        let j = if self.t1 > self.t0 { j } else { j + 1 };
        self.t0 + (self.t1 - self.t0) * j as f64 / self.steps as f64
    }
}

#[derive(Clone, Debug)]
pub struct IntegrationResult {
    /// Final states; `dlogp` holds the accumulated log-density change.
    pub batch: PhaseBatch,
    pub wall_time: f64,
    pub step_count: usize,
    /// RK4: vector-field evaluations. Taylor-Verlet: coefficient-network calls.
    pub field_evaluations: usize,
}

impl IntegrationResult {
    pub fn state(&self, row: usize) -> PhaseState {
        self.batch.state(row)
    }

    pub fn dlogp(&self) -> &Array1<f64> {
        &self.batch.dlogp
    }
}

/// Dispatches on `cfg.method`.
pub fn integrate(flow: &VerletFlow, batch: &PhaseBatch, cfg: &IntegratorConfig) -> Result<IntegrationResult> {
    match cfg.method {
        Method::TaylorVerlet => verlet_integrate(flow, batch, cfg),
        Method::Rk4Exact | Method::Rk4Hutchinson => rk4_integrate(flow, batch, cfg),
    }
}

pub fn verlet_integrate(
    flow: &VerletFlow,
    batch: &PhaseBatch,
    cfg: &IntegratorConfig,
) -> Result<IntegrationResult> {
    if cfg.method != Method::TaylorVerlet {
        return Err(FlowError::Config(format!(
            "verlet_integrate called with method {}",
            cfg.method
        )));
    }
    cfg.validate()?;
    flow.check_batch(batch)?;
    check_start_time(batch, cfg)?;
    let start = Instant::now();
    let bound = BoundFlow::eager(flow);
    let dlogp = batch.dlogp.clone().insert_axis(Axis(1));
    let (q, p, dlogp) = verlet_core(&bound, batch.q.clone(), batch.p.clone(), dlogp, cfg)?;
    Ok(IntegrationResult {
        batch: PhaseBatch {
            q,
            p,
            t: cfg.t1,
            dlogp: dlogp.remove_axis(Axis(1)),
        },
        wall_time: start.elapsed().as_secs_f64(),
        step_count: cfg.steps,
        field_evaluations: 2 * (flow.order() + 1) * cfg.steps,
    })
}

fn check_start_time(batch: &PhaseBatch, cfg: &IntegratorConfig) -> Result<()> {
    if (batch.t - cfg.t0).abs() > 1e-12 {
        return Err(FlowError::Contract(format!(
            "state time {} does not match t0 = {}",
            batch.t, cfg.t0
        )));
    }
    Ok(())
}

/// Taylor-Verlet integration in any backend; `dlogp` is a `B×1` column.
pub fn verlet_core<B: Backend>(
    bound: &BoundFlow<'_, B>,
    mut q: B::T,
    mut p: B::T,
    mut dlogp: B::T,
    cfg: &IntegratorConfig,
) -> Result<(B::T, B::T, B::T)> {
    let b = bound.backend;
    let tau = cfg.tau();
    let order = bound.flow.order();
    let forward = cfg.t1 > cfg.t0;

    let update = |side: Side, k: usize, q: &mut B::T, p: &mut B::T, t: f64| -> Result<B::T> {
        let (x, other) = match side {
            Side::Q => (&*q, &*p),
            Side::P => (&*p, &*q),
        };
        let s = bound.coefficient(side, k, other, t)?;
        let form = bound.flow.net(side, k)?.form;
        let (y, logdet) = operators::apply(b, side, k, form, &s, x, tau)?;
        match side {
            Side::Q => *q = y,
            Side::P => *p = y,
        }
        Ok(logdet)
    };

    for j in 0..cfg.steps {
        let t = cfg.step_time(j);
        let mut run = || -> Result<()> {
            if forward {
                for k in 0..=order {
                    for side in [Side::Q, Side::P] {
                        let ld = update(side, k, &mut q, &mut p, t)?;
                        dlogp = b.sub(&dlogp, &ld);
                    }
                }
            } else {
                for k in (0..=order).rev() {
                    for side in [Side::P, Side::Q] {
                        let ld = update(side, k, &mut q, &mut p, t)?;
                        dlogp = b.sub(&dlogp, &ld);
                    }
                }
            }
            Ok(())
        };
        run().map_err(|e| e.at_step(j))?;
    }
    Ok((q, p, dlogp))
}

/// Classic RK4 on `(q, p, ℓ)` with `dℓ/dt = −Tr J`, the trace taken exactly
/// from the autodiff Jacobian or estimated with Rademacher probes, one per
/// trajectory and held fixed across its field evaluations.
pub fn rk4_integrate(
    flow: &VerletFlow,
    batch: &PhaseBatch,
    cfg: &IntegratorConfig,
) -> Result<IntegrationResult> {
    let mut probes: Vec<ChaCha8Rng> = (0..batch.len() as u64)
        .map(|i| rng::stream(cfg.seed, Purpose::Probe, i))
        .collect();
    rk4_with_probes(flow, batch, cfg, &mut probes)
}

/// RK4 integration with caller-supplied per-row probe generators.
pub fn rk4_with_probes(
    flow: &VerletFlow,
    batch: &PhaseBatch,
    cfg: &IntegratorConfig,
    probes: &mut [ChaCha8Rng],
) -> Result<IntegrationResult> {
    if cfg.method == Method::TaylorVerlet {
        return Err(FlowError::Config("rk4_integrate called with taylor-verlet".into()));
    }
    cfg.validate()?;
    flow.check_batch(batch)?;
    check_start_time(batch, cfg)?;
    if probes.len() != batch.len() {
        return Err(FlowError::Shape(format!(
            "{} probe generators for {} rows",
            probes.len(),
            batch.len()
        )));
    }
    let start = Instant::now();
    let (dq, _) = flow.dims();
    let tau = cfg.tau();
    let mut x = ndarray::concatenate(Axis(1), &[batch.q.view(), batch.p.view()])
        .map_err(|e| FlowError::Shape(e.to_string()))?;
    let mut ell = batch.dlogp.clone();

    // Hutchinson probes are drawn once per trajectory and reused at every
    // field evaluation
    let n = x.ncols();
    let eps: Vec<Matrix> = if cfg.method == Method::Rk4Hutchinson {
        (0..cfg.hutchinson_probes)
            .map(|_| {
                let mut e = Array2::zeros((batch.len(), n));
                for (r, rng) in probes.iter_mut().enumerate() {
                    e.row_mut(r).assign(&Array1::from(rng::rademacher(rng, n)));
                }
                e
            })
            .collect()
    } else {
        Vec::new()
    };
    let eval = |x: &Matrix, t: f64| field_and_trace(flow, x, t, cfg.method, &eps);
    for j in 0..cfg.steps {
        let t = cfg.t0 + (cfg.t1 - cfg.t0) * j as f64 / cfg.steps as f64;
        let mut step = || -> Result<()> {
            let (k1, tr1) = eval(&x, t)?;
            let (k2, tr2) = eval(&(&x + &(&k1 * (tau / 2.0))), t + tau / 2.0)?;
            let (k3, tr3) = eval(&(&x + &(&k2 * (tau / 2.0))), t + tau / 2.0)?;
            let (k4, tr4) = eval(&(&x + &(&k3 * tau)), t + tau)?;
            x = &x + &((&k1 + &(&k2 * 2.0) + &(&k3 * 2.0) + &k4) * (tau / 6.0));
            ell = &ell - &((&tr1 + &(&tr2 * 2.0) + &(&tr3 * 2.0) + &tr4) * (tau / 6.0));
            if x.iter().chain(ell.iter()).any(|v| !v.is_finite()) {
                return Err(FlowError::NonFinite {
                    side: Side::Q,
                    order: 0,
                    step: None,
                });
            }
            Ok(())
        };
        step().map_err(|e| e.at_step(j))?;
    }
    let q = x.slice(ndarray::s![.., ..dq]).to_owned();
    let p = x.slice(ndarray::s![.., dq..]).to_owned();
    Ok(IntegrationResult {
        batch: PhaseBatch {
            q,
            p,
            t: cfg.t1,
            dlogp: ell,
        },
        wall_time: start.elapsed().as_secs_f64(),
        step_count: cfg.steps,
        field_evaluations: 4 * cfg.steps,
    })
}

/// Field value at `x = [q | p]` and the per-row Jacobian trace, exact or
/// estimated with the probe matrices `eps`.
fn field_and_trace(
    flow: &VerletFlow,
    x: &Matrix,
    t: f64,
    method: Method,
    eps: &[Matrix],
) -> Result<(Matrix, Array1<f64>)> {
    let (dq, dp) = flow.dims();
    let n = dq + dp;
    let rows = x.nrows();
    let tape = Tape::new();
    let recorded = flow.record(&tape, false);
    let bound = BoundFlow::taped(&tape, flow, &recorded);
    let xv = tape.var(x.clone());
    let q = tape.cols(&xv, 0, dq);
    let p = tape.cols(&xv, dq, dp);
    let (fq, fp) = bound.field(&q, &p, t)?;
    let f = tape.concat_cols(&[&fq, &fp]);
    let value = tape.value(f);

    let mut trace = Array1::zeros(rows);
    match method {
        Method::Rk4Exact => {
            // one reverse pass per output component; keep the diagonal entry
            for i in 0..n {
                let mut seed = Array2::zeros((rows, n));
                seed.column_mut(i).fill(1.0);
                let g = tape.backward_seeded(f, seed)?.wrt(xv);
                trace += &g.column(i);
            }
        }
        Method::Rk4Hutchinson => {
            for e in eps {
                let vjp = tape.backward_seeded(f, e.clone())?.wrt(xv);
                trace += &(&vjp * e).sum_axis(Axis(1));
            }
            trace /= eps.len() as f64;
        }
        Method::TaylorVerlet => unreachable!(),
    }
    Ok((value, trace))
}

/// Mean of `εᵀ(Jε)` over Rademacher probes; unbiased for `Tr J`.
pub fn hutchinson_trace(
    mut jvp: impl FnMut(&[f64]) -> Vec<f64>,
    dim: usize,
    probes: usize,
    rng: &mut impl Rng,
) -> f64 {
    let probes = probes.max(1);
    let mut acc = 0.0;
    for _ in 0..probes {
        let eps = rng::rademacher(rng, dim);
        let jv = jvp(&eps);
        acc += eps.iter().zip(&jv).map(|(a, b)| a * b).sum::<f64>();
    }
    acc / probes as f64
}

/// Convenience wrapper for a single state in eager mode.
pub fn integrate_state(
    flow: &VerletFlow,
    state: &PhaseState,
    cfg: &IntegratorConfig,
) -> Result<PhaseState> {
    Ok(integrate(flow, &PhaseBatch::from_state(state), cfg)?.state(0))
}

/// Exact trace of the field Jacobian at one state; used as a reference.
pub fn field_trace(flow: &VerletFlow, state: &PhaseState) -> Result<f64> {
    let batch = PhaseBatch::from_state(state);
    let x = ndarray::concatenate(Axis(1), &[batch.q.view(), batch.p.view()]).unwrap();
    Ok(field_and_trace(flow, &x, state.t, Method::Rk4Exact, &[])?.1[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::LinearForm;
    use rand::SeedableRng;

    fn set_bias(flow: &mut VerletFlow, side: Side, k: usize, v: &[f64]) {
        let net = &mut flow.net_mut(side, k).unwrap().net;
        let last = net.layers_mut().last_mut().unwrap();
        last.bias = Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap();
    }

    fn batch(q: &[f64], p: &[f64], t: f64) -> PhaseBatch {
        PhaseBatch::from_state(&PhaseState::new(q.to_vec(), p.to_vec(), t).unwrap())
    }

    #[test]
    fn identity_flow() {
        let flow = VerletFlow::zeros(2, 2, 2, &[4], LinearForm::Diagonal).unwrap();
        let b = batch(&[0.3, -1.0], &[2.0, 0.5], 0.0);
        let r = verlet_integrate(&flow, &b, &IntegratorConfig::forward(7, Method::TaylorVerlet)).unwrap();
        assert_eq!(r.batch.q, b.q);
        assert_eq!(r.batch.p, b.p);
        assert_eq!(r.batch.t, 1.0);
        assert_eq!(r.dlogp()[0], 0.0);
        assert_eq!(r.field_evaluations, 2 * 3 * 7);
    }

    #[test]
    fn constant_translation() {
        let mut flow = VerletFlow::zeros(2, 2, 0, &[4], LinearForm::Diagonal).unwrap();
        let c = [0.75, -1.25];
        set_bias(&mut flow, Side::Q, 0, &c);
        for steps in [1, 3, 16] {
            let b = batch(&[0.5, 0.5], &[1.0, 2.0], 0.0);
            let r = verlet_integrate(&flow, &b, &IntegratorConfig::forward(steps, Method::TaylorVerlet)).unwrap();
            let q = r.batch.q.row(0);
            assert!((q[0] - 1.25).abs() < 1e-14 && (q[1] + 0.75).abs() < 1e-14, "{q}");
            assert_eq!(r.batch.p, b.p);
            assert_eq!(r.dlogp()[0], 0.0);
        }
    }

    #[test]
    fn zero_field_rk4_is_identity() {
        let flow = VerletFlow::zeros(2, 2, 1, &[4], LinearForm::Diagonal).unwrap();
        let b = batch(&[0.3, -1.0], &[2.0, 0.5], 0.0);
        for m in [Method::Rk4Exact, Method::Rk4Hutchinson] {
            let r = rk4_integrate(&flow, &b, &IntegratorConfig::forward(5, m)).unwrap();
            assert_eq!(r.batch.q, b.q);
            assert_eq!(r.dlogp()[0], 0.0);
            assert_eq!(r.field_evaluations, 20);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let flow = VerletFlow::zeros(1, 1, 0, &[2], LinearForm::Diagonal).unwrap();
        let b = batch(&[0.3], &[0.1], 0.0);
        let mut cfg = IntegratorConfig::forward(0, Method::TaylorVerlet);
        assert!(verlet_integrate(&flow, &b, &cfg).is_err());
        cfg.steps = 2;
        cfg.t1 = 0.0;
        assert!(verlet_integrate(&flow, &b, &cfg).is_err());
        let late = batch(&[0.3], &[0.1], 0.5);
        assert!(verlet_integrate(&flow, &late, &IntegratorConfig::forward(2, Method::TaylorVerlet)).is_err());
        assert!(rk4_integrate(&flow, &b, &IntegratorConfig::forward(2, Method::TaylorVerlet)).is_err());
        assert_eq!("rk4-exact".parse::<Method>().unwrap(), Method::Rk4Exact);
        assert!("euler".parse::<Method>().is_err());
    }

    #[test]
    fn singularity_carries_step_index() {
        let mut flow = VerletFlow::zeros(1, 1, 2, &[2], LinearForm::Diagonal).unwrap();
        // dq/dt = q² blows up at t = 1 for q0 = 1; 4 steps of 0.25 hit b = 0 on the last one
        set_bias(&mut flow, Side::Q, 2, &[1.25]);
        let b = batch(&[1.0], &[0.0], 0.0);
        let r = verlet_integrate(&flow, &b, &IntegratorConfig::forward(4, Method::TaylorVerlet));
        match r {
            Err(FlowError::Singularity { step: Some(s), .. }) => assert!(s <= 3),
            other => panic!("expected singularity, got {other:?}"),
        }
    }

    #[test]
    fn hutchinson_diagonal_is_exact() {
        let diag = [1.5, -2.0, 0.25];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let est = hutchinson_trace(
            |v| v.iter().zip(&diag).map(|(a, b)| a * b).collect(),
            3,
            1,
            &mut rng,
        );
        assert_eq!(est, diag.iter().sum::<f64>());
    }

    #[test]
    fn hutchinson_is_deterministic() {
        let a = [[1.0, 2.0], [-3.0, 0.5]];
        let run = || {
            let mut rng = rng::stream(9, Purpose::Probe, 0);
            hutchinson_trace(
                |v| (0..2).map(|i| a[i][0] * v[0] + a[i][1] * v[1]).collect(),
                2,
                5,
                &mut rng,
            )
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
