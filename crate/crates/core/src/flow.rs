//! Phase-space states and the order-N Verlet flow parameterization.
//!
//! The flow's q-velocity is a truncated Taylor series in q whose
//! coefficients are networks of `(p, t)`, and symmetrically for p:
//!
//! ```text
//! dq/dt = Σ_{k=0..N} s_k^q(p, t)(q^{⊗k})
//! dp/dt = Σ_{k=0..N} s_k^p(q, t)(p^{⊗k})
//! ```
//!
//! `k = 0` coefficients are vectors, `k = 1` coefficients are diagonal (or,
//! for inference, dense) matrices, and `k ≥ 2` coefficients are restricted
//! to on-diagonal tensors so the contraction becomes `s ∘ q^{∘k}`.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Eager, Layer, Matrix, Mlp, Tape, Var};
use crate::error::{FlowError, Result, Side};

/// Shape of the order-1 coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearForm {
    #[default]
    Diagonal,
    Dense,
}

/// How a coefficient network's output is contracted with the same-side variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputForm {
    Vector,
    Diagonal,
    Dense,
    SparseDiagonal,
}

impl OutputForm {
    pub fn for_order(order: usize, linear: LinearForm) -> Self {
        match (order, linear) {
            (0, _) => OutputForm::Vector,
            (1, LinearForm::Diagonal) => OutputForm::Diagonal,
            (1, LinearForm::Dense) => OutputForm::Dense,
            _ => OutputForm::SparseDiagonal,
        }
    }

    pub fn output_dim(self, d_self: usize) -> usize {
        match self {
            OutputForm::Dense => d_self * d_self,
            _ => d_self,
        }
    }
}

/// A point in phase-time space with its accumulated log-density change.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseState {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub t: f64,
    pub dlogp: f64,
}

impl PhaseState {
    pub fn new(q: Vec<f64>, p: Vec<f64>, t: f64) -> Result<Self> {
        if q.is_empty() || p.is_empty() {
            return Err(FlowError::Shape("q and p must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(FlowError::Contract(format!("time {t} outside [0, 1]")));
        }
        if q.iter().chain(&p).any(|v| !v.is_finite()) {
            return Err(FlowError::Contract("state entries must be finite".into()));
        }
        Ok(Self {
            q,
            p,
            t,
            dlogp: 0.0,
        })
    }

    pub fn side(&self, side: Side) -> &[f64] {
        match side {
            Side::Q => &self.q,
            Side::P => &self.p,
        }
    }

    pub fn side_mut(&mut self, side: Side) -> &mut Vec<f64> {
        match side {
            Side::Q => &mut self.q,
            Side::P => &mut self.p,
        }
    }
}

/// A batch of phase states sharing one time value; rows are samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseBatch {
    pub q: Matrix,
    pub p: Matrix,
    pub t: f64,
    pub dlogp: Array1<f64>,
}

impl PhaseBatch {
    pub fn new(q: Matrix, p: Matrix, t: f64) -> Result<Self> {
        if q.nrows() != p.nrows() {
            return Err(FlowError::Shape(format!(
                "q has {} rows, p has {}",
                q.nrows(),
                p.nrows()
            )));
        }
        let n = q.nrows();
        Ok(Self {
            q,
            p,
            t,
            dlogp: Array1::zeros(n),
        })
    }

    pub fn len(&self) -> usize {
        self.q.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_state(s: &PhaseState) -> Self {
        Self {
            q: Array2::from_shape_vec((1, s.q.len()), s.q.clone()).unwrap(),
            p: Array2::from_shape_vec((1, s.p.len()), s.p.clone()).unwrap(),
            t: s.t,
            dlogp: Array1::from_elem(1, s.dlogp),
        }
    }

    pub fn state(&self, row: usize) -> PhaseState {
        PhaseState {
            q: self.q.row(row).to_vec(),
            p: self.p.row(row).to_vec(),
            t: self.t,
            dlogp: self.dlogp[row],
        }
    }
}

/// One Taylor coefficient network.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientNet {
    pub side: Side,
    pub order: usize,
    pub form: OutputForm,
    pub net: Mlp,
}

/// An order-N Verlet flow on `R^{d_q} × R^{d_p}`.
#[derive(Clone, Debug, PartialEq)]
pub struct VerletFlow {
    order: usize,
    dq: usize,
    dp: usize,
    hidden: Vec<usize>,
    linear: LinearForm,
    /// q-side nets for k = 0..=N, then p-side nets for k = 0..=N.
    nets: Vec<CoefficientNet>,
}

impl VerletFlow {
    pub fn new(
        dq: usize,
        dp: usize,
        order: usize,
        hidden: &[usize],
        linear: LinearForm,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::build(dq, dp, order, hidden, linear, |sizes| Mlp::new(sizes, rng))
    }

    /// A flow whose every coefficient is identically zero.
    pub fn zeros(
        dq: usize,
        dp: usize,
        order: usize,
        hidden: &[usize],
        linear: LinearForm,
    ) -> Result<Self> {
        Self::build(dq, dp, order, hidden, linear, Mlp::zeros)
    }

    fn build(
        dq: usize,
        dp: usize,
        order: usize,
        hidden: &[usize],
        linear: LinearForm,
        mut make: impl FnMut(&[usize]) -> Result<Mlp>,
    ) -> Result<Self> {
        if dq == 0 || dp == 0 {
            return Err(FlowError::Shape("d_q and d_p must be positive".into()));
        }
        let mut nets = Vec::with_capacity(2 * (order + 1));
        for side in [Side::Q, Side::P] {
            let (d_self, d_other) = match side {
                Side::Q => (dq, dp),
                Side::P => (dp, dq),
            };
            for k in 0..=order {
                let form = OutputForm::for_order(k, linear);
                let mut sizes = vec![d_other + 1];
                sizes.extend_from_slice(hidden);
                sizes.push(form.output_dim(d_self));
                nets.push(CoefficientNet {
                    side,
                    order: k,
                    form,
                    net: make(&sizes)?,
                });
            }
        }
        Ok(Self {
            order,
            dq,
            dp,
            hidden: hidden.to_vec(),
            linear,
            nets,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.dq, self.dp)
    }

    pub fn dim(&self, side: Side) -> usize {
        match side {
            Side::Q => self.dq,
            Side::P => self.dp,
        }
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn linear_form(&self) -> LinearForm {
        self.linear
    }

    pub fn nets(&self) -> &[CoefficientNet] {
        &self.nets
    }

    fn index(&self, side: Side, k: usize) -> usize {
        let base = match side {
            Side::Q => 0,
            Side::P => self.order + 1,
        };
        base + k
    }

    pub fn net(&self, side: Side, k: usize) -> Result<&CoefficientNet> {
        self.check_order(k)?;
        Ok(&self.nets[self.index(side, k)])
    }

    pub fn net_mut(&mut self, side: Side, k: usize) -> Result<&mut CoefficientNet> {
        self.check_order(k)?;
        let i = self.index(side, k);
        Ok(&mut self.nets[i])
    }

    fn check_order(&self, k: usize) -> Result<()> {
        if k > self.order {
            Err(FlowError::Order {
                requested: k,
                max: self.order,
            })
        } else {
            Ok(())
        }
    }

    pub fn param_count(&self) -> usize {
        self.nets.iter().map(|n| n.net.param_count()).sum()
    }

    /// All parameters in checkpoint order.
    pub fn params(&self) -> Vec<f64> {
        self.nets.iter().flat_map(|n| n.net.params()).collect()
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(FlowError::Shape(format!(
                "flow has {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut offset = 0;
        for n in &mut self.nets {
            offset += n.net.set_params(&values[offset..])?;
        }
        Ok(())
    }

    pub fn check_batch(&self, batch: &PhaseBatch) -> Result<()> {
        if batch.q.ncols() != self.dq || batch.p.ncols() != self.dp {
            return Err(FlowError::Shape(format!(
                "flow dims ({}, {}) but state dims ({}, {})",
                self.dq,
                self.dp,
                batch.q.ncols(),
                batch.p.ncols()
            )));
        }
        Ok(())
    }

    /// Records every network on `tape`; see [`Mlp::record`].
    pub fn record(&self, tape: &Tape, trainable: bool) -> Vec<Vec<Layer<Var>>> {
        self.nets.iter().map(|n| n.net.record(tape, trainable)).collect()
    }

    /// Evaluates one Taylor term at a single state.
    pub fn eval_term(&self, side: Side, k: usize, state: &PhaseState) -> Result<Vec<f64>> {
        self.check_order(k)?;
        let batch = PhaseBatch::from_state(state);
        self.check_batch(&batch)?;
        let bound = BoundFlow::eager(self);
        let (x, other) = match side {
            Side::Q => (&batch.q, &batch.p),
            Side::P => (&batch.p, &batch.q),
        };
        let s = bound.coefficient(side, k, other, batch.t)?;
        Ok(bound.term(side, k, &s, x).into_raw_vec_and_offset().0)
    }

    /// Evaluates the full vector field `(dq/dt, dp/dt)` at a single state.
    pub fn eval_field(&self, state: &PhaseState) -> Result<(Vec<f64>, Vec<f64>)> {
        let batch = PhaseBatch::from_state(state);
        self.check_batch(&batch)?;
        let bound = BoundFlow::eager(self);
        let (fq, fp) = bound.field(&batch.q, &batch.p, batch.t)?;
        Ok((
            fq.into_raw_vec_and_offset().0,
            fp.into_raw_vec_and_offset().0,
        ))
    }
}

/// A flow whose networks are bound to a backend: eager arrays or tape
/// variables.
pub struct BoundFlow<'a, B: Backend> {
    pub backend: &'a B,
    pub flow: &'a VerletFlow,
    nets: Vec<&'a [Layer<B::T>]>,
}

impl<'a> BoundFlow<'a, Eager> {
    pub fn eager(flow: &'a VerletFlow) -> Self {
        BoundFlow {
            backend: &Eager,
            flow,
            nets: flow.nets.iter().map(|n| n.net.layers()).collect(),
        }
    }
}

impl<'a> BoundFlow<'a, Tape> {
    pub fn taped(tape: &'a Tape, flow: &'a VerletFlow, recorded: &'a [Vec<Layer<Var>>]) -> Self {
        BoundFlow {
            backend: tape,
            flow,
            nets: recorded.iter().map(Vec::as_slice).collect(),
        }
    }
}

impl<B: Backend> BoundFlow<'_, B> {
    /// Coefficient `s_k^{side}` evaluated on the opposite variable at time `t`.
    pub fn coefficient(&self, side: Side, k: usize, other: &B::T, t: f64) -> Result<B::T> {
        let b = self.backend;
        let rows = b.dims(other).0;
        let tcol = b.constant(Array2::from_elem((rows, 1), t));
        let input = b.concat_cols(&[other, &tcol]);
        let out = crate::autodiff::forward_with(b, self.nets[self.flow.index(side, k)], &input);
        if !b.inspect(&out, |v| v.iter().all(|x| x.is_finite())) {
            return Err(FlowError::NonFinite {
                side,
                order: k,
                step: None,
            });
        }
        Ok(out)
    }

    /// Contracts a realized coefficient with the same-side variable.
    pub fn term(&self, side: Side, k: usize, s: &B::T, x: &B::T) -> B::T {
        let b = self.backend;
        match self.flow.nets[self.flow.index(side, k)].form {
            OutputForm::Vector => s.clone(),
            OutputForm::Diagonal => b.mul(s, x),
            OutputForm::Dense => b.row_matvec(s, x),
            OutputForm::SparseDiagonal => b.mul(s, &b.powf(x, k as f64)),
        }
    }

    /// The field, summed over k in increasing order on each side.
    pub fn field(&self, q: &B::T, p: &B::T, t: f64) -> Result<(B::T, B::T)> {
        let mut out = Vec::with_capacity(2);
        for side in [Side::Q, Side::P] {
            let (x, other) = match side {
                Side::Q => (q, p),
                Side::P => (p, q),
            };
            let mut acc: Option<B::T> = None;
            for k in 0..=self.flow.order {
                let s = self.coefficient(side, k, other, t)?;
                let term = self.term(side, k, &s, x);
                acc = Some(match acc {
                    None => term,
                    Some(a) => self.backend.add(&a, &term),
                });
            }
            out.push(acc.unwrap());
        }
        let fp = out.pop().unwrap();
        let fq = out.pop().unwrap();
        Ok((fq, fp))
    }
}
