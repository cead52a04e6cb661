//! Randomized verification suites behind `verletflow check`.
//!
//! Each suite returns every failing case instead of stopping at the first,
//! so the report can be emitted as JSON.

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::couplings::{apply_as_verlet, apply_coupling, CouplingFlow, CouplingKind, CouplingLayer};
use crate::error::{Result, Side};
use crate::flow::{LinearForm, PhaseBatch, PhaseState, VerletFlow};
use crate::integrators::{integrate, IntegratorConfig, Method};
use crate::io::{checkpoint_from_str, checkpoint_to_string};
use crate::linalg::{fd_jacobian, log_abs_det};
use crate::operators::{Coefficient, OperatorStep};
use crate::rng::{self, Purpose};

/// Deliberate defects used to confirm that a suite can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Reports the negated log-determinant.
    FlipLogDetSign,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckFailure {
    pub case: String,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub suite: String,
    pub cases: usize,
    pub max_error: f64,
    pub failures: Vec<CheckFailure>,
}

impl CheckReport {
    fn new(suite: &str) -> Self {
        Self {
            suite: suite.into(),
            cases: 0,
            max_error: 0.0,
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, case: impl FnOnce() -> String, error: f64, tol: f64, what: &str) {
        self.max_error = self.max_error.max(if error.is_nan() { f64::INFINITY } else { error });
        if !(error <= tol) {
            self.failures.push(CheckFailure {
                case: case(),
                detail: format!("{what}: error {error:e} exceeds {tol:e}"),
            });
        }
    }

    fn fail(&mut self, case: String, detail: String) {
        self.failures.push(CheckFailure { case, detail });
    }
}

/// Finite-difference step for log-determinant checks.
pub const FD_STEP: f64 = 1e-6;
pub const LOGDET_TOL: f64 = 1e-5;
pub const ROUNDTRIP_TOL: f64 = 1e-9;

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn away_from_zero(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    let v = uniform(rng, lo, hi);
    if rng.random::<bool>() {
        v
    } else {
        -v
    }
}

/// Draws a step and a state for `kind` that keeps every order-k base at
/// least a tenth of its starting magnitude with unchanged sign.
fn draw_operator(kind: &str, rng: &mut ChaCha8Rng) -> (OperatorStep, Vec<f64>) {
    let d = rng.random_range(1..=4usize);
    loop {
        let tau = uniform(rng, 0.01, 0.5);
        let x: Vec<f64> = (0..d).map(|_| away_from_zero(rng, 0.2, 2.0)).collect();
        let (order, coefficient) = match kind {
            "order0" => (0, Coefficient::Vector((0..d).map(|_| uniform(rng, -2.0, 2.0)).collect())),
            "order1-diagonal" => (1, Coefficient::Diagonal((0..d).map(|_| uniform(rng, -2.0, 2.0)).collect())),
            "order1-dense" => (1, Coefficient::Dense((0..d * d).map(|_| uniform(rng, -1.0, 1.0)).collect())),
            "order2" => (2, Coefficient::Sparse((0..d).map(|_| uniform(rng, -1.0, 1.0)).collect())),
            "order3" => (3, Coefficient::Sparse((0..d).map(|_| uniform(rng, -1.0, 1.0)).collect())),
            other => unreachable!("unknown operator kind {other}"),
        };
        if let Coefficient::Sparse(s) = &coefficient {
            let k = order as i32;
            let safe = x.iter().zip(s).all(|(xi, si)| {
                let b0 = xi.signum().powi(1 - k) * xi.abs().powi(1 - k);
                let b = b0 + tau * (1 - k) as f64 * si;
                b.signum() == b0.signum() && b.abs() >= 0.1 * b0.abs()
            });
            if !safe {
                continue;
            }
        }
        let side = if rng.random::<bool>() { Side::Q } else { Side::P };
        return (OperatorStep::new(side, order, tau, coefficient).unwrap(), x);
    }
}

pub const OPERATOR_KINDS: [&str; 5] = ["order0", "order1-diagonal", "order1-dense", "order2", "order3"];

/// Every operator's reported log-det against the finite-difference
/// Jacobian, and apply/invert round trips, over `draws` cases per kind.
pub fn operators_suite(draws: usize, seed: u64, fault: Fault) -> CheckReport {
    let mut report = CheckReport::new("operators");
    for (ki, kind) in OPERATOR_KINDS.iter().enumerate() {
        let mut rng = rng::stream(seed, Purpose::Init, 100 + ki as u64);
        for i in 0..draws {
            report.cases += 1;
            let (step, x) = draw_operator(kind, &mut rng);
            let case = || format!("{kind} #{i}: {step:?} at {x:?}");
            let (y, mut logdet) = match step.map(&x) {
                Ok(v) => v,
                Err(e) => {
                    report.fail(case(), e.to_string());
                    continue;
                }
            };
            if fault == Fault::FlipLogDetSign {
                logdet = -logdet;
            }
            if kind == &"order0" && logdet != 0.0 {
                report.fail(case(), format!("order-0 log-det {logdet} is not exactly zero"));
            }
            let jac = fd_jacobian(|z| step.map(z).map(|r| r.0).unwrap_or_else(|_| vec![f64::NAN; z.len()]), &x, FD_STEP);
            report.record(case, (log_abs_det(&jac) - logdet).abs(), LOGDET_TOL, "log-det");
            match step.inverse_map(&y) {
                Ok((back, inv_logdet)) => {
                    let err = back
                        .iter()
                        .zip(&x)
                        .map(|(a, b)| (a - b).abs() / b.abs())
                        .fold(0.0, f64::max);
                    report.record(case, err, ROUNDTRIP_TOL, "round trip");
                    let ld = if fault == Fault::FlipLogDetSign { -inv_logdet } else { inv_logdet };
                    report.record(case, (ld + logdet).abs(), 1e-9, "inverse log-det");
                }
                Err(e) => report.fail(case(), format!("inverse failed: {e}")),
            }
        }
    }
    report
}

pub const COUPLING_TAUS: [f64; 3] = [0.01, 0.5, 1.0];
pub const COUPLING_TOL: f64 = 1e-10;

/// Coupling layers against their operator-step realizations, and stacks
/// of layers against the non-standard integrator.
pub fn couplings_suite(draws: usize, seed: u64) -> CheckReport {
    let mut report = CheckReport::new("couplings");
    let mut rng = rng::stream(seed, Purpose::Init, 200);
    for i in 0..draws {
        let kind = if i % 2 == 0 { CouplingKind::Additive } else { CouplingKind::Affine };
        let side = if i % 4 < 2 { Side::Q } else { Side::P };
        let (dq, dp) = (rng.random_range(1..=3usize), rng.random_range(1..=3usize));
        let (ds, dother) = match side {
            Side::Q => (dq, dp),
            Side::P => (dp, dq),
        };
        let layer = match CouplingLayer::random(kind, side, ds, dother, &[8], &mut rng) {
            Ok(l) => l,
            Err(e) => {
                report.fail(format!("#{i}"), e.to_string());
                continue;
            }
        };
        let z = rng::standard_normal(&mut rng, dq + dp);
        let state = PhaseState::new(z[..dq].to_vec(), z[dq..].to_vec(), 0.0).unwrap();
        let (q, p, ld) = apply_coupling(&layer, &state.q, &state.p).unwrap();
        for tau in COUPLING_TAUS {
            report.cases += 1;
            let case = || format!("{kind:?} {side} layer #{i}, tau {tau}");
            match apply_as_verlet(&layer, tau, &state) {
                Ok(out) => {
                    report.record(case, max_diff(&out, &q, &p), COUPLING_TOL, "state");
                    report.record(case, (out.dlogp + ld).abs(), COUPLING_TOL, "log-det");
                }
                Err(e) => report.fail(case(), e.to_string()),
            }
        }
    }
    for j in 0..(draws / 10).max(1) {
        report.cases += 1;
        let kind = if j % 2 == 0 { CouplingKind::Additive } else { CouplingKind::Affine };
        let flow = CouplingFlow::random(kind, 1 + j % 5, 2, 2, &[8], &mut rng).unwrap();
        let z = rng::standard_normal(&mut rng, 4);
        let state = PhaseState::new(z[..2].to_vec(), z[2..].to_vec(), 0.0).unwrap();
        let (q, p, ld) = flow.apply(&state.q, &state.p).unwrap();
        let case = || format!("{kind:?} stack #{j} of {} layers", flow.layers.len());
        match flow.integrate(&state) {
            Ok(out) => {
                report.record(case, max_diff(&out, &q, &p), COUPLING_TOL, "stacked state");
                report.record(case, (out.dlogp + ld).abs(), COUPLING_TOL, "stacked log-det");
            }
            Err(e) => report.fail(case(), e.to_string()),
        }
    }
    report
}

fn max_diff(s: &PhaseState, q: &[f64], p: &[f64]) -> f64 {
    s.q.iter()
        .zip(q)
        .chain(s.p.iter().zip(p))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Forward-then-reverse integration of random flows, and checkpoint
/// serialization round trips.
pub fn roundtrip_suite(flows: usize, seed: u64) -> CheckReport {
    let mut report = CheckReport::new("roundtrip");
    for i in 0..flows {
        let mut rng = rng::stream(seed, Purpose::Init, 300 + i as u64);
        let order = rng.random_range(0..=2usize);
        let (dq, dp) = (rng.random_range(1..=3usize), rng.random_range(1..=3usize));
        let flow = VerletFlow::new(dq, dp, order, &[8, 8], LinearForm::Diagonal, &mut rng).unwrap();
        let steps = [1, 10, 50][i % 3];
        let case = || format!("flow #{i}: order {order}, dims ({dq}, {dp}), {steps} steps");

        report.cases += 1;
        let text = checkpoint_to_string(&flow);
        match checkpoint_from_str(&text) {
            Ok(back) => {
                let same = back
                    .params()
                    .iter()
                    .zip(flow.params())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                if !same || back != flow {
                    report.fail(case(), "checkpoint round trip changed parameters".into());
                }
            }
            Err(e) => report.fail(case(), format!("checkpoint reload failed: {e}")),
        }

        report.cases += 1;
        let rows = 4;
        let z: Vec<f64> = (0..rows * (dq + dp)).map(|_| rng.next_u64() as f64 / u64::MAX as f64 * 2.0 - 1.0).collect();
        let q = ndarray::Array2::from_shape_fn((rows, dq), |(r, c)| z[r * (dq + dp) + c]);
        let p = ndarray::Array2::from_shape_fn((rows, dp), |(r, c)| z[r * (dq + dp) + dq + c]);
        let batch = PhaseBatch::new(q, p, 0.0).unwrap();
        let run = || -> Result<(PhaseBatch, PhaseBatch)> {
            let fwd = integrate(&flow, &batch, &IntegratorConfig::forward(steps, Method::TaylorVerlet))?;
            let back = integrate(&flow, &fwd.batch, &IntegratorConfig::reverse(steps, Method::TaylorVerlet))?;
            Ok((fwd.batch, back.batch))
        };
        match run() {
            Ok((_, back)) => {
                let err = (&back.q - &batch.q)
                    .iter()
                    .chain((&back.p - &batch.p).iter())
                    .fold(0.0f64, |m, v| m.max(v.abs()));
                report.record(case, err, 1e-8, "state");
                let dl = back.dlogp.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                report.record(case, dl, 1e-8, "dlogp");
            }
            // a trajectory through the singular set is not a round-trip failure
            Err(crate::error::FlowError::Singularity { .. }) => {}
            Err(e) => report.fail(case(), e.to_string()),
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operators_suite_passes() {
        let r = operators_suite(40, 1, Fault::None);
        assert!(r.passed(), "{:?}", r.failures.first());
        assert_eq!(r.cases, 200);
    }

    #[test]
    fn operators_suite_catches_sign_bug() {
        let r = operators_suite(20, 1, Fault::FlipLogDetSign);
        assert!(!r.passed());
        assert!(r.failures.iter().any(|f| f.case.starts_with("order1")));
    }

    #[test]
    fn couplings_suite_passes() {
        let r = couplings_suite(40, 2);
        assert!(r.passed(), "{:?}", r.failures.first());
    }

    #[test]
    fn roundtrip_suite_passes() {
        let r = roundtrip_suite(6, 3);
        assert!(r.passed(), "{:?}", r.failures.first());
    }
}
