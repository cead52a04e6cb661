//! NICE and RealNVP coupling layers, both applied directly and rebuilt as
//! Taylor-Verlet operator steps on the fixed `(q, p)` partition.
//!
//! An affine layer `x ↦ x ∘ exp(s(o)) + t(o)` is the order-1 step with
//! coefficient `s/τ` applied after the order-0 step with coefficient
//! `t / (τ exp(s))`; an additive layer is the order-0 step alone. Both
//! steps of a layer act on the same side, so this grouping is not the
//! standard q/p interleaving.

use rand::Rng;

use crate::autodiff::Mlp;
use crate::error::{FlowError, Result, Side};
use crate::flow::PhaseState;
use crate::operators::{apply_step, Coefficient, OperatorStep};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CouplingKind {
    Additive,
    Affine,
}

/// A coupling layer updating `side` from the opposite variable.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingLayer {
    pub kind: CouplingKind,
    pub side: Side,
    pub shift: Mlp,
    /// Present for affine layers only.
    pub scale: Option<Mlp>,
}

impl CouplingLayer {
    pub fn additive(side: Side, shift: Mlp) -> Self {
        Self {
            kind: CouplingKind::Additive,
            side,
            shift,
            scale: None,
        }
    }

    pub fn affine(side: Side, shift: Mlp, scale: Mlp) -> Result<Self> {
        if shift.sizes().first() != scale.sizes().first() || shift.output_dim() != scale.output_dim() {
            return Err(FlowError::Shape("shift and scale nets disagree in shape".into()));
        }
        Ok(Self {
            kind: CouplingKind::Affine,
            side,
            shift,
            scale: Some(scale),
        })
    }

    /// Layer with random tanh nets mapping `d_other → d_self`.
    pub fn random(
        kind: CouplingKind,
        side: Side,
        d_self: usize,
        d_other: usize,
        hidden: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut sizes = vec![d_other];
        sizes.extend_from_slice(hidden);
        sizes.push(d_self);
        let shift = Mlp::new(&sizes, rng)?;
        match kind {
            CouplingKind::Additive => Ok(Self::additive(side, shift)),
            CouplingKind::Affine => Self::affine(side, shift, Mlp::new(&sizes, rng)?),
        }
    }

    fn check(&self, x: &[f64], other: &[f64]) -> Result<()> {
        if self.shift.input_dim() != other.len() || self.shift.output_dim() != x.len() {
            return Err(FlowError::Shape(format!(
                "coupling nets map {} → {}, state has {} → {}",
                self.shift.input_dim(),
                self.shift.output_dim(),
                other.len(),
                x.len()
            )));
        }
        Ok(())
    }

    /// `(t(o), s(o))` with `s ≡ 0` for additive layers.
    fn nets(&self, other: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let t = self.shift.forward(other)?;
        let s = match &self.scale {
            Some(net) => net.forward(other)?,
            None => vec![0.0; t.len()],
        };
        Ok((t, s))
    }
}

fn split(state: &PhaseState, side: Side) -> (&[f64], &[f64]) {
    (state.side(side), state.side(side.other()))
}

/// Direct coupling update; returns the new state and `log|det J|`.
pub fn apply_coupling(layer: &CouplingLayer, q: &[f64], p: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let (x, other) = match layer.side {
        Side::Q => (q, p),
        Side::P => (p, q),
    };
    layer.check(x, other)?;
    let (t, s) = layer.nets(other)?;
    let (y, logdet) = match layer.kind {
        CouplingKind::Additive => (x.iter().zip(&t).map(|(a, b)| a + b).collect::<Vec<_>>(), 0.0),
        CouplingKind::Affine => (
            x.iter()
                .zip(&s)
                .zip(&t)
                .map(|((a, si), ti)| a * si.exp() + ti)
                .collect(),
            s.iter().sum(),
        ),
    };
    Ok(match layer.side {
        Side::Q => (y, p.to_vec(), logdet),
        Side::P => (q.to_vec(), y, logdet),
    })
}

/// The layer as operator steps of duration `tau`, with coefficients
/// realized at the current opposite variable (which the steps leave
/// unchanged).
pub fn as_verlet_steps(layer: &CouplingLayer, tau: f64, state: &PhaseState) -> Result<Vec<OperatorStep>> {
    if !(tau > 0.0) {
        return Err(FlowError::Contract(format!("step duration must be positive, got {tau}")));
    }
    let (x, other) = split(state, layer.side);
    layer.check(x, other)?;
    let (t, s) = layer.nets(other)?;
    match layer.kind {
        CouplingKind::Additive => {
            let shift = t.iter().map(|ti| ti / tau).collect();
            Ok(vec![OperatorStep::new(layer.side, 0, tau, Coefficient::Vector(shift))?])
        }
        CouplingKind::Affine => {
            let rate: Vec<f64> = s.iter().map(|si| si / tau).collect();
            let shift = t
                .iter()
                .zip(&rate)
                .map(|(ti, ri)| ti / (tau * (tau * ri).exp()))
                .collect();
            Ok(vec![
                OperatorStep::new(layer.side, 0, tau, Coefficient::Vector(shift))?,
                OperatorStep::new(layer.side, 1, tau, Coefficient::Diagonal(rate))?,
            ])
        }
    }
}

/// Applies `layer` through its operator steps; `dlogp` decreases by the
/// layer's log-determinant.
pub fn apply_as_verlet(layer: &CouplingLayer, tau: f64, state: &PhaseState) -> Result<PhaseState> {
    as_verlet_steps(layer, tau, state)?
        .iter()
        .try_fold(state.clone(), |s, step| apply_step(step, &s))
}

/// A stack of coupling layers on the canonical partition.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingFlow {
    pub layers: Vec<CouplingLayer>,
}

impl CouplingFlow {
    /// `steps` pairs of (q-layer, p-layer) with random nets.
    pub fn random(
        kind: CouplingKind,
        steps: usize,
        dq: usize,
        dp: usize,
        hidden: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(2 * steps);
        for _ in 0..steps {
            layers.push(CouplingLayer::random(kind, Side::Q, dq, dp, hidden, rng)?);
            layers.push(CouplingLayer::random(kind, Side::P, dp, dq, hidden, rng)?);
        }
        Ok(Self { layers })
    }

    /// Composition of the direct layer maps; returns `(q, p, log|det J|)`.
    pub fn apply(&self, q: &[f64], p: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let (mut q, mut p, mut logdet) = (q.to_vec(), p.to_vec(), 0.0);
        for layer in &self.layers {
            let (nq, np, ld) = apply_coupling(layer, &q, &p)?;
            q = nq;
            p = np;
            logdet += ld;
        }
        Ok((q, p, logdet))
    }

    /// The non-standard Taylor-Verlet integrator of the corresponding
    /// Verlet flow over `[0, 1]`: each layer is one group of same-side
    /// steps of duration `1 / steps`, with `t` advanced after each
    /// (q, p) pair.
    pub fn integrate(&self, state: &PhaseState) -> Result<PhaseState> {
        let pairs = self.layers.len().div_ceil(2).max(1);
        let tau = 1.0 / pairs as f64;
        let mut s = state.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            s = apply_as_verlet(layer, tau, &s)?;
            if i % 2 == 1 {
                s.t += tau;
            }
        }
        Ok(s)
    }
}
