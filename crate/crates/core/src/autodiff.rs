//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Values are 2-D arrays whose rows are independent samples, so a single
//! recorded pass covers a whole batch. The [`Backend`] trait abstracts over
//! eager evaluation ([`Eager`]) and recording on a [`Tape`]; model code is
//! written once against the trait and runs in either mode with identical
//! arithmetic.

use std::cell::RefCell;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{FlowError, Result};

pub type Matrix = Array2<f64>;

/// Primitive operations shared by eager evaluation and tape recording.
///
/// Shape mismatches inside primitives are programming errors and panic;
/// public entry points validate shapes before reaching them.
pub trait Backend {
    type T: Clone;

    fn constant(&self, value: Matrix) -> Self::T;
    fn dims(&self, x: &Self::T) -> (usize, usize);
    fn inspect<R>(&self, x: &Self::T, f: impl FnOnce(ArrayView2<'_, f64>) -> R) -> R;

    fn add(&self, a: &Self::T, b: &Self::T) -> Self::T;
    fn sub(&self, a: &Self::T, b: &Self::T) -> Self::T;
    fn mul(&self, a: &Self::T, b: &Self::T) -> Self::T;
    fn matmul(&self, a: &Self::T, b: &Self::T) -> Self::T;
    /// Adds a `1×n` row to every row of `a`.
    fn add_row(&self, a: &Self::T, row: &Self::T) -> Self::T;
    fn scale(&self, a: &Self::T, c: f64) -> Self::T;
    fn add_scalar(&self, a: &Self::T, c: f64) -> Self::T;
    fn tanh(&self, a: &Self::T) -> Self::T;
    fn exp(&self, a: &Self::T) -> Self::T;
    fn log(&self, a: &Self::T) -> Self::T;
    fn powf(&self, a: &Self::T, c: f64) -> Self::T;
    /// `B×n → B×1`
    fn row_sum(&self, a: &Self::T) -> Self::T;
    /// `B×n → 1×1`
    fn sum(&self, a: &Self::T) -> Self::T;
    fn concat_cols(&self, parts: &[&Self::T]) -> Self::T;
    fn cols(&self, a: &Self::T, start: usize, len: usize) -> Self::T;
    /// Per-row matrix-vector product: row `b` of `m` holds a row-major
    /// `d×d` matrix applied to row `b` of `x`.
    fn row_matvec(&self, m: &Self::T, x: &Self::T) -> Self::T;

    fn dot(&self, a: &Self::T, b: &Self::T) -> Self::T {
        self.sum(&self.mul(a, b))
    }

    fn neg(&self, a: &Self::T) -> Self::T {
        self.scale(a, -1.0)
    }

    fn mul_const(&self, a: &Self::T, c: Matrix) -> Self::T {
        let c = self.constant(c);
        self.mul(a, &c)
    }

    /// `exp(τ·S)·x` per row for dense `S`. Only available in eager mode.
    fn dense_exp_apply(&self, _s: &Self::T, _x: &Self::T, _tau: f64) -> Result<Self::T> {
        Err(FlowError::Unsupported(
            "dense order-1 coefficients cannot be differentiated through the matrix exponential"
                .into(),
        ))
    }
}

/// Eager evaluation on plain arrays.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Backend for Eager {
    type T = Matrix;

    fn constant(&self, value: Matrix) -> Matrix {
        value
    }

    fn dims(&self, x: &Matrix) -> (usize, usize) {
        x.dim()
    }

    fn inspect<R>(&self, x: &Matrix, f: impl FnOnce(ArrayView2<'_, f64>) -> R) -> R {
        f(x.view())
    }

    fn add(&self, a: &Matrix, b: &Matrix) -> Matrix {
        assert_eq!(a.dim(), b.dim(), "add");
        a + b
    }

    fn sub(&self, a: &Matrix, b: &Matrix) -> Matrix {
        assert_eq!(a.dim(), b.dim(), "sub");
        a - b
    }

    fn mul(&self, a: &Matrix, b: &Matrix) -> Matrix {
        assert_eq!(a.dim(), b.dim(), "mul");
        a * b
    }

    fn matmul(&self, a: &Matrix, b: &Matrix) -> Matrix {
        a.dot(b)
    }

    fn add_row(&self, a: &Matrix, row: &Matrix) -> Matrix {
        assert_eq!(row.nrows(), 1, "add_row");
        a + row
    }

    fn scale(&self, a: &Matrix, c: f64) -> Matrix {
        a * c
    }

    fn add_scalar(&self, a: &Matrix, c: f64) -> Matrix {
        a + c
    }

    fn tanh(&self, a: &Matrix) -> Matrix {
        tanh_matrix(a)
    }

    fn exp(&self, a: &Matrix) -> Matrix {
        a.mapv(f64::exp)
    }

    fn log(&self, a: &Matrix) -> Matrix {
        a.mapv(f64::ln)
    }

    fn powf(&self, a: &Matrix, c: f64) -> Matrix {
        a.mapv(|x| x.powf(c))
    }

    fn row_sum(&self, a: &Matrix) -> Matrix {
        row_sum(a)
    }

    fn sum(&self, a: &Matrix) -> Matrix {
        Array2::from_elem((1, 1), a.sum())
    }

    fn concat_cols(&self, parts: &[&Matrix]) -> Matrix {
        concat_cols(parts.iter().map(|m| m.view()))
    }

    fn cols(&self, a: &Matrix, start: usize, len: usize) -> Matrix {
        a.slice(s![.., start..start + len]).to_owned()
    }

    fn row_matvec(&self, m: &Matrix, x: &Matrix) -> Matrix {
        row_matvec(m, x)
    }

    fn dense_exp_apply(&self, s: &Matrix, x: &Matrix, tau: f64) -> Result<Matrix> {
        let d = x.ncols();
        let mut out = Array2::zeros(x.dim());
        for (b, (s_row, x_row)) in s.outer_iter().zip(x.outer_iter()).enumerate() {
            let m = s_row
                .to_owned()
                .into_shape_with_order((d, d))
                .map_err(|e| FlowError::Shape(e.to_string()))?
                * tau;
            let e = crate::operators::expm(&m);
            out.row_mut(b).assign(&e.dot(&x_row));
        }
        Ok(out)
    }
}

/// `tanh` from a polynomial `exp(-2|x|)`. Absolute error stays below
/// `2e-16`; libm is several times slower and dominates network evaluation.
#[inline]
pub fn tanh(x: f64) -> f64 {
    let a = x.abs();
    let e = exp_nonpositive(-2.0 * if a < 20.0 { a } else { 20.0 });
    let r = if a < 20.0 { (1.0 - e) / (1.0 + e) } else { 1.0 };
    let r = r.copysign(x);
    if x.is_nan() { x } else { r }
}

/// Elementwise [`tanh`], vectorized when the CPU supports AVX2. Both paths
/// give identical bits.
pub fn tanh_in_place(v: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was checked just above.
        unsafe { tanh_avx2(v) };
        return;
    }
    v.iter_mut().for_each(|z| *z = tanh(*z));
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn tanh_avx2(v: &mut [f64]) {
    v.iter_mut().for_each(|z| *z = tanh(*z));
}

fn tanh_matrix(a: &Matrix) -> Matrix {
    let mut out = a.as_standard_layout().into_owned();
    tanh_in_place(out.as_slice_mut().expect("standard layout"));
    out
}

/// `exp(y)` for `y ∈ [-40, 0]`: reduction by `ln 2`, degree-13 Horner.
#[inline]
fn exp_nonpositive(y: f64) -> f64 {
    const SHIFT: f64 = 6755399441055744.0;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let shifted = y * std::f64::consts::LOG2_E + SHIFT;
    let n = shifted - SHIFT;
    let r = (y - n * LN2_HI) - n * LN2_LO;
    let mut poly = 1.0 / 6227020800.0;
    for c in [
        1.0 / 479001600.0,
        1.0 / 39916800.0,
        1.0 / 3628800.0,
        1.0 / 362880.0,
        1.0 / 40320.0,
        1.0 / 5040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        poly = poly * r + c;
    }
    // The low mantissa bits of `shifted` hold n in two's complement.
    let scale = f64::from_bits(shifted.to_bits().wrapping_add(1023) << 52);
    poly * scale
}

fn row_sum(a: &Matrix) -> Matrix {
    a.sum_axis(Axis(1)).insert_axis(Axis(1))
}

fn concat_cols<'a>(parts: impl Iterator<Item = ArrayView2<'a, f64>>) -> Matrix {
    let parts: Vec<_> = parts.collect();
    ndarray::concatenate(Axis(1), &parts).expect("concat_cols: row counts differ")
}

fn row_matvec(m: &Matrix, x: &Matrix) -> Matrix {
    let (rows, d) = x.dim();
    assert_eq!(m.dim(), (rows, d * d), "row_matvec");
    let mut out = Array2::zeros((rows, d));
    for b in 0..rows {
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += m[[b, i * d + j]] * x[[b, j]];
            }
            out[[b, i]] = acc;
        }
    }
    out
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Powf(usize, f64),
    RowSum(usize),
    Sum(usize),
    Concat(Vec<usize>),
    Cols(usize, usize),
    RowMatVec(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of primitive operations.
///
/// Nodes are stored in creation order, so every operand precedes its
/// consumers. Leaves created with [`Tape::var`] receive gradients; leaves
/// created with [`Tape::constant`] and everything computed only from
/// constants are skipped during the reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a differentiable leaf.
    pub fn var(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Matrix {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.id].value[[0, 0]]
    }

    fn push(&self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        let (rows, cols) = value.dim();
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { id, rows, cols }
    }

    fn unary(&self, a: &Var, f: impl FnOnce(&Matrix) -> Matrix, op: Op) -> Var {
        let (value, ng) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.id];
            (f(&n.value), n.needs_grad)
        };
        self.push(value, op, ng)
    }

    fn binary(&self, a: &Var, b: &Var, f: impl FnOnce(&Matrix, &Matrix) -> Matrix, op: Op) -> Var {
        let (value, ng) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.id], &nodes[b.id]);
            (f(&na.value, &nb.value), na.needs_grad || nb.needs_grad)
        };
        self.push(value, op, ng)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if !output.is_scalar() {
            return Err(FlowError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                output.shape()
            )));
        }
        self.backward_seeded(output, Array2::ones((1, 1)))
    }

    /// Reverse sweep with an explicit upstream gradient (a vector-Jacobian
    /// product when `output` is not scalar).
    pub fn backward_seeded(&self, output: Var, seed: Matrix) -> Result<Gradients> {
        if seed.dim() != output.shape() {
            return Err(FlowError::Shape(format!(
                "seed {:?} does not match output {:?}",
                seed.dim(),
                output.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Matrix>> = vec![None; output.id + 1];
        grads[output.id] = Some(seed);

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let ng = |i: usize| nodes[i].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if ng(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if ng(*b) {
                        accumulate(&mut grads, *b, -&g);
                    }
                    if ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if ng(*a) {
                        accumulate(&mut grads, *a, &g * &nodes[*b].value);
                    }
                    if ng(*b) {
                        accumulate(&mut grads, *b, &g * &nodes[*a].value);
                    }
                }
                Op::MatMul(a, b) => {
                    if ng(*a) {
                        accumulate(&mut grads, *a, g.dot(&nodes[*b].value.t()));
                    }
                    if ng(*b) {
                        accumulate(&mut grads, *b, nodes[*a].value.t().dot(&g));
                    }
                }
                Op::AddRow(a, row) => {
                    if ng(*row) {
                        accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gi, &y| *gi *= 1.0 - y * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, g * &node.value),
                Op::Log(a) => accumulate(&mut grads, *a, g / &nodes[*a].value),
                Op::Powf(a, c) => {
                    let c = *c;
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&nodes[*a].value)
                        .for_each(|gi, &x| *gi *= c * x.powf(c - 1.0));
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSum(a) => {
                    let cols = nodes[*a].value.ncols();
                    let ga = g
                        .broadcast((g.nrows(), cols))
                        .expect("row_sum gradient broadcast")
                        .to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(nodes[*a].value.dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = nodes[p].value.ncols();
                        if ng(p) {
                            accumulate(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::Cols(a, start) => {
                    let mut ga = Array2::zeros(nodes[*a].value.dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowMatVec(m, x) => {
                    let (mv, xv) = (&nodes[*m].value, &nodes[*x].value);
                    let (rows, d) = xv.dim();
                    if ng(*m) {
                        let mut gm = Array2::zeros(mv.dim());
                        for b in 0..rows {
                            for i in 0..d {
                                for j in 0..d {
                                    gm[[b, i * d + j]] = g[[b, i]] * xv[[b, j]];
                                }
                            }
                        }
                        accumulate(&mut grads, *m, gm);
                    }
                    if ng(*x) {
                        let mut gx = Array2::zeros(xv.dim());
                        for b in 0..rows {
                            for i in 0..d {
                                for j in 0..d {
                                    gx[[b, j]] += g[[b, i]] * mv[[b, i * d + j]];
                                }
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: usize, g: Matrix) {
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of one reverse sweep, indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`; zeros when `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(v.shape()))
    }
}

impl Backend for Tape {
    type T = Var;

    fn constant(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn dims(&self, x: &Var) -> (usize, usize) {
        x.shape()
    }

    fn inspect<R>(&self, x: &Var, f: impl FnOnce(ArrayView2<'_, f64>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(nodes[x.id].value.view())
    }

    fn add(&self, a: &Var, b: &Var) -> Var {
        self.binary(a, b, |x, y| Eager.add(x, y), Op::Add(a.id, b.id))
    }

    fn sub(&self, a: &Var, b: &Var) -> Var {
        self.binary(a, b, |x, y| Eager.sub(x, y), Op::Sub(a.id, b.id))
    }

    fn mul(&self, a: &Var, b: &Var) -> Var {
        self.binary(a, b, |x, y| Eager.mul(x, y), Op::Mul(a.id, b.id))
    }

    fn matmul(&self, a: &Var, b: &Var) -> Var {
        self.binary(a, b, |x, y| x.dot(y), Op::MatMul(a.id, b.id))
    }

    fn add_row(&self, a: &Var, row: &Var) -> Var {
        self.binary(a, row, |x, r| Eager.add_row(x, r), Op::AddRow(a.id, row.id))
    }

    fn scale(&self, a: &Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a.id, c))
    }

    fn add_scalar(&self, a: &Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a.id))
    }

    fn tanh(&self, a: &Var) -> Var {
        self.unary(a, tanh_matrix, Op::Tanh(a.id))
    }

    fn exp(&self, a: &Var) -> Var {
        self.unary(a, |x| x.mapv(f64::exp), Op::Exp(a.id))
    }

    fn log(&self, a: &Var) -> Var {
        self.unary(a, |x| x.mapv(f64::ln), Op::Log(a.id))
    }

    fn powf(&self, a: &Var, c: f64) -> Var {
        self.unary(a, |x| x.mapv(|v| v.powf(c)), Op::Powf(a.id, c))
    }

    fn row_sum(&self, a: &Var) -> Var {
        self.unary(a, row_sum, Op::RowSum(a.id))
    }

    fn sum(&self, a: &Var) -> Var {
        self.unary(a, |x| Array2::from_elem((1, 1), x.sum()), Op::Sum(a.id))
    }

    fn concat_cols(&self, parts: &[&Var]) -> Var {
        let (value, ng) = {
            let nodes = self.nodes.borrow();
            let value = concat_cols(parts.iter().map(|v| nodes[v.id].value.view()));
            (value, parts.iter().any(|v| nodes[v.id].needs_grad))
        };
        self.push(value, Op::Concat(parts.iter().map(|v| v.id).collect()), ng)
    }

    fn cols(&self, a: &Var, start: usize, len: usize) -> Var {
        self.unary(
            a,
            |x| x.slice(s![.., start..start + len]).to_owned(),
            Op::Cols(a.id, start),
        )
    }

    fn row_matvec(&self, m: &Var, x: &Var) -> Var {
        self.binary(m, x, row_matvec, Op::RowMatVec(m.id, x.id))
    }
}

/// One affine layer; `weight` is `n_in × n_out` and `bias` is `1 × n_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: T,
    pub bias: T,
}

/// Fully connected network with tanh hidden activations and an affine
/// output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    layers: Vec<Layer<Matrix>>,
}

impl Mlp {
    /// Weights uniform in `±1/√n_in`, biases zero.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut mlp = Self::zeros(sizes)?;
        for layer in &mut mlp.layers {
            let bound = 1.0 / (layer.weight.nrows() as f64).sqrt();
            layer
                .weight
                .mapv_inplace(|_| rng.random_range(-bound..=bound));
        }
        Ok(mlp)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(FlowError::Shape(format!(
                "layer sizes must have at least two positive entries, got {sizes:?}"
            )));
        }
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array2::zeros((1, w[1])),
            })
            .collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            layers,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer<Matrix>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<Matrix>] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Parameters in layer-major order, weight (row-major) before bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Inverse of [`Mlp::params`]; returns the number of values consumed.
    pub fn set_params(&mut self, values: &[f64]) -> Result<usize> {
        if values.len() < self.param_count() {
            return Err(FlowError::Shape(format!(
                "need {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut it = values.iter();
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().unwrap();
            }
        }
        Ok(self.param_count())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec())
            .map_err(|e| FlowError::Shape(e.to_string()))?;
        Ok(self.forward_batch(&x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, input: &Matrix) -> Result<Matrix> {
        if input.ncols() != self.input_dim() {
            return Err(FlowError::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.ncols()
            )));
        }
        Ok(forward_with(&Eager, &self.layers, input))
    }

    /// Records the parameters on `tape`, as differentiable leaves when
    /// `trainable` and as constants otherwise.
    pub fn record(&self, tape: &Tape, trainable: bool) -> Vec<Layer<Var>> {
        let leaf = |m: &Matrix| {
            if trainable {
                tape.var(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        self.layers
            .iter()
            .map(|l| Layer {
                weight: leaf(&l.weight),
                bias: leaf(&l.bias),
            })
            .collect()
    }
}

/// Network forward pass over a batch, in any backend.
pub fn forward_with<B: Backend>(b: &B, layers: &[Layer<B::T>], input: &B::T) -> B::T {
    let mut h = input.clone();
    for (i, l) in layers.iter().enumerate() {
        h = b.add_row(&b.matmul(&h, &l.weight), &l.bias);
        if i + 1 < layers.len() {
            h = b.tanh(&h);
        }
    }
    h
}

/// Exact Jacobian of a square map `R^n → R^n` at `x`, one reverse pass per
/// output component.
pub fn jacobian(f: impl Fn(&Tape, Var) -> Var, x: &[f64]) -> Result<Matrix> {
    let n = x.len();
    if n == 0 {
        return Err(FlowError::Contract("jacobian of an empty input".into()));
    }
    let tape = Tape::new();
    let input = tape.var(Array2::from_shape_vec((1, n), x.to_vec()).unwrap());
    let out = f(&tape, input);
    if out.shape() != (1, n) {
        return Err(FlowError::Contract(format!(
            "jacobian needs a square map; input 1×{n}, output {:?}",
            out.shape()
        )));
    }
    let mut jac = Array2::zeros((n, n));
    for i in 0..n {
        let mut seed = Array2::zeros((1, n));
        seed[[0, i]] = 1.0;
        let g = tape.backward_seeded(out, seed)?;
        jac.row_mut(i).assign(&g.wrt(input).row(0));
    }
    Ok(jac)
}
