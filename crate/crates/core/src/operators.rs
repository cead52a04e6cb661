//! Closed-form pseudo time-evolution operators for single Taylor terms.
//!
//! Each operator moves one side of phase space along one term of the flow
//! for a duration `τ`, holding the opposite side and `t` fixed:
//!
//! | order | map of the side variable `x`                     | log-det                                   |
//! |-------|--------------------------------------------------|-------------------------------------------|
//! | 0     | `x + τ·s`                                        | `0`                                       |
//! | 1     | `exp(τ·S)·x`                                     | `tr(τ·S)`                                 |
//! | k ≥ 2 | `(x^{1-k} + τ(1-k)s)^{1/(1-k)}` componentwise    | `Σ k/(1-k)·log|b| − k·log|x|`             |
//!
//! Log-densities follow the convention `Δlog p ← Δlog p − log|det J|`.

use ndarray::Array2;

use crate::autodiff::{Backend, Eager, Matrix};
use crate::error::{FlowError, Result, Side};
use crate::flow::{OutputForm, PhaseState};

/// Minimum admissible `|b_i|` for order k ≥ 2 updates.
pub const SINGULARITY_MARGIN: f64 = 1e-12;

/// A realized coefficient value.
#[derive(Clone, Debug, PartialEq)]
pub enum Coefficient {
    /// Order 0 shift vector.
    Vector(Vec<f64>),
    /// Order 1 diagonal.
    Diagonal(Vec<f64>),
    /// Order 1 dense matrix, row-major `d×d`.
    Dense(Vec<f64>),
    /// Order k ≥ 2 on-diagonal tensor entries.
    Sparse(Vec<f64>),
}

impl Coefficient {
    fn values(&self) -> &[f64] {
        match self {
            Coefficient::Vector(v)
            | Coefficient::Diagonal(v)
            | Coefficient::Dense(v)
            | Coefficient::Sparse(v) => v,
        }
    }

    fn form(&self) -> OutputForm {
        match self {
            Coefficient::Vector(_) => OutputForm::Vector,
            Coefficient::Diagonal(_) => OutputForm::Diagonal,
            Coefficient::Dense(_) => OutputForm::Dense,
            Coefficient::Sparse(_) => OutputForm::SparseDiagonal,
        }
    }
}

/// One closed-form split update with its coefficient already realized.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorStep {
    pub side: Side,
    pub order: usize,
    pub tau: f64,
    pub coefficient: Coefficient,
}

impl OperatorStep {
    pub fn new(side: Side, order: usize, tau: f64, coefficient: Coefficient) -> Result<Self> {
        let ok = match (&coefficient, order) {
            (Coefficient::Vector(_), 0) => true,
            (Coefficient::Diagonal(_) | Coefficient::Dense(_), 1) => true,
            (Coefficient::Sparse(_), k) => k >= 2,
            _ => false,
        };
        if !ok {
            return Err(FlowError::Shape(format!(
                "coefficient {:?} does not fit an order-{order} step",
                coefficient.form()
            )));
        }
        if !tau.is_finite() {
            return Err(FlowError::Contract(format!("step duration {tau} is not finite")));
        }
        Ok(Self {
            side,
            order,
            tau,
            coefficient,
        })
    }

    /// Applies the step to a side variable, returning the new value and the
    /// log-determinant of the map.
    pub fn map(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.map_with_tau(x, self.tau)
    }

    /// Exact inverse of [`OperatorStep::map`]; the returned log-det is that
    /// of the inverse map.
    pub fn inverse_map(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.map_with_tau(y, -self.tau)
    }

    fn map_with_tau(&self, x: &[f64], tau: f64) -> Result<(Vec<f64>, f64)> {
        let d = x.len();
        let s = self.coefficient.values();
        let expected = self.coefficient.form().output_dim(d);
        if s.len() != expected {
            return Err(FlowError::Shape(format!(
                "coefficient has {} entries, variable of dimension {d} needs {expected}",
                s.len()
            )));
        }
        let xm = Array2::from_shape_vec((1, d), x.to_vec()).unwrap();
        let sm = Array2::from_shape_vec((1, s.len()), s.to_vec()).unwrap();
        let (y, logdet) = apply(
            &Eager,
            self.side,
            self.order,
            self.coefficient.form(),
            &sm,
            &xm,
            tau,
        )?;
        Ok((y.into_raw_vec_and_offset().0, logdet[[0, 0]]))
    }
}

/// Applies `step` to the matching side of `state`, decreasing `dlogp` by the log-det.
pub fn apply_step(step: &OperatorStep, state: &PhaseState) -> Result<PhaseState> {
    let (y, logdet) = step.map(state.side(step.side))?;
    let mut out = state.clone();
    *out.side_mut(step.side) = y;
    out.dlogp -= logdet;
    Ok(out)
}

/// Exact inverse of [`apply_step`] for the same realized coefficient.
pub fn invert_step(step: &OperatorStep, state: &PhaseState) -> Result<PhaseState> {
    let (x, logdet) = step.inverse_map(state.side(step.side))?;
    let mut out = state.clone();
    *out.side_mut(step.side) = x;
    out.dlogp -= logdet;
    Ok(out)
}

pub fn apply_order0(state: &PhaseState, side: Side, s0: &[f64], tau: f64) -> Result<PhaseState> {
    apply_step(
        &OperatorStep::new(side, 0, tau, Coefficient::Vector(s0.to_vec()))?,
        state,
    )
}

pub fn apply_order1(
    state: &PhaseState,
    side: Side,
    s1: Coefficient,
    tau: f64,
) -> Result<PhaseState> {
    apply_step(&OperatorStep::new(side, 1, tau, s1)?, state)
}

pub fn apply_orderk(
    state: &PhaseState,
    side: Side,
    sk: &[f64],
    k: usize,
    tau: f64,
) -> Result<PhaseState> {
    apply_step(
        &OperatorStep::new(side, k, tau, Coefficient::Sparse(sk.to_vec()))?,
        state,
    )
}

/// Batched operator application in any backend. Returns the updated side
/// variable and the per-row log-determinant (`B×1`).
pub fn apply<B: Backend>(
    b: &B,
    side: Side,
    order: usize,
    form: OutputForm,
    s: &B::T,
    x: &B::T,
    tau: f64,
) -> Result<(B::T, B::T)> {
    let rows = b.dims(x).0;
    match form {
        OutputForm::Vector => {
            let y = b.add(x, &b.scale(s, tau));
            Ok((y, b.constant(Array2::zeros((rows, 1)))))
        }
        OutputForm::Diagonal => {
            let y = b.mul(x, &b.exp(&b.scale(s, tau)));
            Ok((y, b.scale(&b.row_sum(s), tau)))
        }
        OutputForm::Dense => {
            let y = b.dense_exp_apply(s, x, tau)?;
            let d = b.dims(x).1;
            let trace = b.inspect(s, |sv| {
                Array2::from_shape_fn((rows, 1), |(r, _)| {
                    (0..d).map(|i| sv[[r, i * d + i]]).sum::<f64>() * tau
                })
            });
            Ok((y, b.constant(trace)))
        }
        OutputForm::SparseDiagonal => apply_sparse(b, side, order, s, x, tau),
    }
}

fn apply_sparse<B: Backend>(
    b: &B,
    side: Side,
    k: usize,
    s: &B::T,
    x: &B::T,
    tau: f64,
) -> Result<(B::T, B::T)> {
    let e = 1.0 - k as f64;
    let odd_exponent = (k - 1) % 2 == 1;
    let singular = |row: usize, component: usize| FlowError::Singularity {
        side,
        order: k,
        row,
        component,
        step: None,
    };

    let sign_x = b.inspect(x, |xv| -> Result<Matrix> {
        if let Some(((r, c), _)) = xv.indexed_iter().find(|(_, v)| **v == 0.0) {
            return Err(singular(r, c));
        }
        Ok(xv.mapv(f64::signum))
    })?;
    // sign of x^{1-k}
    let sign_b = if odd_exponent {
        sign_x.clone()
    } else {
        Array2::ones(sign_x.dim())
    };

    let abs_x = b.mul_const(x, sign_x.clone());
    let base0 = b.mul_const(&b.powf(&abs_x, e), sign_b.clone());
    let base = b.add(&base0, &b.scale(s, tau * e));
    // The closed form is the ODE solution only while b keeps its starting sign.
    b.inspect(&base, |bv| -> Result<()> {
        for ((r, c), v) in bv.indexed_iter() {
            if !(v * sign_b[[r, c]] > SINGULARITY_MARGIN) {
                return Err(singular(r, c));
            }
        }
        Ok(())
    })?;
    let abs_base = b.mul_const(&base, sign_b);
    let y = b.mul_const(&b.powf(&abs_base, 1.0 / e), sign_x);
    let k = k as f64;
    let logdet = b.row_sum(&b.sub(
        &b.scale(&b.log(&abs_base), k / e),
        &b.scale(&b.log(&abs_x), k),
    ));
    Ok((y, logdet))
}

/// Matrix exponential by scaling and squaring with a degree-16 Taylor
/// polynomial; squarings are chosen so the scaled 1-norm is below 0.5.
pub fn expm(a: &Matrix) -> Matrix {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm needs a square matrix");
    let norm = (0..n)
        .map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0u32;
    let mut scaled_norm = norm;
    while scaled_norm >= 0.5 {
        scaled_norm /= 2.0;
        squarings += 1;
    }
    let scaled = a / 2f64.powi(squarings as i32);

    // Horner evaluation of Σ_{j=0..16} A^j / j!
    let eye: Matrix = Array2::eye(n);
    let mut result = eye.clone();
    for j in (1..=16).rev() {
        result = &eye + &(scaled.dot(&result) / j as f64);
    }
    for _ in 0..squarings {
        result = result.dot(&result);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn st(q: &[f64], p: &[f64]) -> PhaseState {
        PhaseState::new(q.to_vec(), p.to_vec(), 0.5).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
    }

    /// log|det| of the central-difference Jacobian of a componentwise-or-full map.
    fn fd_logdet(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> f64 {
        let n = x.len();
        let mut jac = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let (fp, fm) = (f(&xp), f(&xm));
            for i in 0..n {
                jac[[i, j]] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        crate::linalg::log_abs_det(&jac)
    }

    #[test]
    fn order0_translation() {
        let s = st(&[1.0, 2.0], &[0.0, 0.0]);
        let out = apply_order0(&s, Side::Q, &[3.0, -1.0], 0.5).unwrap();
        assert_eq!(out.q, vec![2.5, 1.5]);
        assert_eq!(out.p, s.p);
        assert_eq!(out.dlogp, s.dlogp);

        let still = apply_order0(&s, Side::Q, &[3.0, -1.0], 0.0).unwrap();
        assert_eq!(still, s);

        let back = apply_order0(&out, Side::Q, &[-1.5, 0.5], 1.0).unwrap();
        assert_eq!(back.q, s.q);
    }

    #[test]
    fn order0_log_det_is_exactly_zero() {
        let step = OperatorStep::new(Side::P, 0, 0.37, Coefficient::Vector(vec![1.0, -9.0])).unwrap();
        assert_eq!(step.map(&[0.2, 0.4]).unwrap().1, 0.0);
    }

    #[test]
    fn order1_diagonal_scaling() {
        let s = st(&[1.0, 1.0], &[0.0, 0.0]);
        let coef = Coefficient::Diagonal(vec![2f64.ln(), 3f64.ln()]);
        let out = apply_order1(&s, Side::Q, coef.clone(), 1.0).unwrap();
        assert!(close(&out.q, &[2.0, 3.0], 1e-15));
        assert!((out.dlogp + 6f64.ln()).abs() < 1e-15);

        let step = OperatorStep::new(Side::Q, 1, 1.0, coef).unwrap();
        let fd = fd_logdet(|x| step.map(x).unwrap().0, &[1.0, 1.0], 1e-6);
        assert!((fd - 6f64.ln()).abs() < 1e-8);

        let zero = apply_order1(&s, Side::Q, Coefficient::Diagonal(vec![0.0, 0.0]), 0.7).unwrap();
        assert_eq!(zero, s);
    }

    #[test]
    fn order1_dense_log_det_is_trace() {
        let s1 = vec![0.4, -1.1, 0.7, 0.2];
        let tau = 0.3;
        let step = OperatorStep::new(Side::P, 1, tau, Coefficient::Dense(s1.clone())).unwrap();
        let (_, logdet) = step.map(&[0.5, -2.0]).unwrap();
        assert!((logdet - tau * (0.4 + 0.2)).abs() < 1e-15);

        let m = array![[0.4, -1.1], [0.7, 0.2]] * tau;
        let e = expm(&m);
        let det = e[[0, 0]] * e[[1, 1]] - e[[0, 1]] * e[[1, 0]];
        assert!((det.abs().ln() - logdet).abs() < 1e-12);
    }

    #[test]
    fn dense_order1_is_rejected_on_tape() {
        let tape = crate::autodiff::Tape::new();
        let s = tape.var(Array2::zeros((1, 4)));
        let x = tape.var(Array2::ones((1, 2)));
        let r = apply(&tape, Side::Q, 1, OutputForm::Dense, &s, &x, 0.1);
        assert!(matches!(r, Err(FlowError::Unsupported(_))));
    }

    #[test]
    fn order2_closed_form() {
        let s = st(&[1.0], &[0.0]);
        let out = apply_orderk(&s, Side::Q, &[1.0], 2, 0.5).unwrap();
        assert!((out.q[0] - 2.0).abs() < 1e-15);
        // dlogp decreases by log-det = 2·log 2
        assert!((out.dlogp + 2.0 * 2f64.ln()).abs() < 1e-14);

        let step = OperatorStep::new(Side::Q, 2, 0.5, Coefficient::Sparse(vec![1.0])).unwrap();
        let h = 1e-6;
        let d = (step.map(&[1.0 + h]).unwrap().0[0] - step.map(&[1.0 - h]).unwrap().0[0]) / (2.0 * h);
        assert!((d - 4.0).abs() < 1e-6);
    }

    #[test]
    fn order3_closed_form() {
        let step = OperatorStep::new(Side::Q, 3, 0.2, Coefficient::Sparse(vec![0.1])).unwrap();
        let (y, logdet) = step.map(&[2.0]).unwrap();
        let expected = (0.25_f64 + 0.2 * -2.0 * 0.1).powf(-0.5);
        assert!((y[0] - expected).abs() < 1e-14);
        assert!((y[0] - 2.1822).abs() < 1e-4);
        let fd = fd_logdet(|x| step.map(x).unwrap().0, &[2.0], 1e-6);
        assert!((fd - logdet).abs() < 1e-6);
    }

    #[test]
    fn sparse_zero_coefficient_is_identity() {
        let s = st(&[1.3, -0.4], &[2.0, 1.0]);
        for k in [2, 3, 4] {
            let out = apply_orderk(&s, Side::Q, &[0.0, 0.0], k, 0.8).unwrap();
            assert!(close(&out.q, &s.q, 1e-15));
            assert!(out.dlogp.abs() < 1e-14);
        }
    }

    #[test]
    fn sparse_preserves_sign_of_negative_components() {
        // dq/dt = s·q³ is odd in q, so the negated start gives the negated solution.
        let step = OperatorStep::new(Side::Q, 3, 0.2, Coefficient::Sparse(vec![0.1])).unwrap();
        let (pos, lp) = step.map(&[2.0]).unwrap();
        let (neg, ln) = step.map(&[-2.0]).unwrap();
        assert!((pos[0] + neg[0]).abs() < 1e-15);
        assert!((lp - ln).abs() < 1e-15);
        // k = 2 with negative q: dq/dt = s·q², q' = 1/(1/q − τs)
        let step = OperatorStep::new(Side::Q, 2, 0.5, Coefficient::Sparse(vec![1.0])).unwrap();
        let (y, _) = step.map(&[-1.0]).unwrap();
        assert!((y[0] - 1.0 / (-1.0 - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn sparse_singularities() {
        // blow-up: b = 1 − 1·1 = 0
        let step = OperatorStep::new(Side::P, 2, 1.0, Coefficient::Sparse(vec![0.5, 1.0])).unwrap();
        let r = step.map(&[1.0, 1.0]);
        assert!(matches!(
            r,
            Err(FlowError::Singularity { side: Side::P, component: 1, .. })
        ));
        // crossing: b changes sign
        let step = OperatorStep::new(Side::Q, 2, 1.0, Coefficient::Sparse(vec![3.0])).unwrap();
        assert!(step.map(&[1.0]).is_err());
        // zero component
        let step = OperatorStep::new(Side::Q, 3, 0.1, Coefficient::Sparse(vec![1.0, 1.0])).unwrap();
        assert!(matches!(
            step.map(&[1.0, 0.0]),
            Err(FlowError::Singularity { component: 1, .. })
        ));
    }

    #[test]
    fn inverse_round_trips() {
        let s = st(&[1.0, 2.0], &[0.3, -0.7]);
        let steps = [
            OperatorStep::new(Side::Q, 0, 0.5, Coefficient::Vector(vec![3.0, -1.0])).unwrap(),
            OperatorStep::new(Side::Q, 1, 1.0, Coefficient::Diagonal(vec![2f64.ln(), 3f64.ln()])).unwrap(),
            OperatorStep::new(Side::P, 1, 0.3, Coefficient::Dense(vec![0.4, -1.1, 0.7, 0.2])).unwrap(),
            OperatorStep::new(Side::Q, 2, 0.5, Coefficient::Sparse(vec![0.3, 0.1])).unwrap(),
            OperatorStep::new(Side::P, 3, 0.2, Coefficient::Sparse(vec![0.1, -0.4])).unwrap(),
            OperatorStep::new(Side::Q, 2, 0.0, Coefficient::Sparse(vec![0.3, 0.1])).unwrap(),
        ];
        for step in &steps {
            let fwd = apply_step(step, &s).unwrap();
            let back = invert_step(step, &fwd).unwrap();
            assert!(close(&back.q, &s.q, 1e-12), "{step:?}");
            assert!(close(&back.p, &s.p, 1e-12), "{step:?}");
            assert!(back.dlogp.abs() < 1e-12);
            assert_eq!(fwd.side(step.side.other()), s.side(step.side.other()));
            assert_eq!(fwd.t, s.t);
        }
    }

    #[test]
    fn step_validation() {
        assert!(OperatorStep::new(Side::Q, 1, 0.1, Coefficient::Vector(vec![1.0])).is_err());
        assert!(OperatorStep::new(Side::Q, 1, 0.1, Coefficient::Sparse(vec![1.0])).is_err());
        assert!(OperatorStep::new(Side::Q, 0, f64::NAN, Coefficient::Vector(vec![1.0])).is_err());
        let step = OperatorStep::new(Side::Q, 0, 0.1, Coefficient::Vector(vec![1.0])).unwrap();
        assert!(matches!(step.map(&[1.0, 2.0]), Err(FlowError::Shape(_))));
    }

    #[test]
    fn expm_matches_known_values() {
        let z = expm(&Array2::zeros((3, 3)));
        assert_eq!(z, Array2::<f64>::eye(3));
        let d = expm(&array![[1.0, 0.0], [0.0, -2.0]]);
        assert!((d[[0, 0]] - 1f64.exp()).abs() < 1e-14);
        assert!((d[[1, 1]] - (-2f64).exp()).abs() < 1e-15);
        // rotation generator
        let theta: f64 = 2.5;
        let r = expm(&array![[0.0, -theta], [theta, 0.0]]);
        assert!((r[[0, 0]] - theta.cos()).abs() < 1e-13);
        assert!((r[[1, 0]] - theta.sin()).abs() < 1e-13);
    }
}
