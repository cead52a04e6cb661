#![allow(dead_code)]

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use verletflow::{LinearForm, PhaseState, Side, VerletFlow};

pub fn random_flow(seed: u64, order: usize, hidden: &[usize]) -> VerletFlow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VerletFlow::new(2, 2, order, hidden, LinearForm::Diagonal, &mut rng).unwrap()
}

pub fn set_bias(flow: &mut VerletFlow, side: Side, k: usize, v: &[f64]) {
    let net = &mut flow.net_mut(side, k).unwrap().net;
    let last = net.layers_mut().last_mut().unwrap();
    last.bias = Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap();
}

pub fn zero_net(flow: &mut VerletFlow, side: Side, k: usize) {
    for l in flow.net_mut(side, k).unwrap().net.layers_mut() {
        l.weight.fill(0.0);
        l.bias.fill(0.0);
    }
}

pub fn flat(s: &PhaseState) -> Vec<f64> {
    s.q.iter().chain(&s.p).copied().collect()
}

pub fn split(x: &[f64], t: f64) -> PhaseState {
    PhaseState::new(x[..2].to_vec(), x[2..].to_vec(), t).unwrap()
}

/// log|det| by Gaussian elimination with partial pivoting.
pub fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        acc += a[c][c].abs().ln();
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    acc
}

/// Central-difference Jacobian of `f` at `x`, rows indexed by output.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[j] += h;
        b[j] -= h;
        let (fa, fb) = (f(&a), f(&b));
        cols.push(fa.iter().zip(&fb).map(|(u, v)| (u - v) / (2.0 * h)).collect::<Vec<_>>());
    }
    (0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect()
}

/// Order-1 flow whose only nonzero coefficient is a diagonal `s_1^q(p)`
/// that ignores t, so p stays frozen and q grows exponentially.
pub fn frozen_p_flow(seed: u64) -> VerletFlow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flow = VerletFlow::new(2, 2, 1, &[16, 16], LinearForm::Diagonal, &mut rng).unwrap();
    zero_net(&mut flow, Side::P, 0);
    zero_net(&mut flow, Side::P, 1);
    zero_net(&mut flow, Side::Q, 0);
    // the input row after p is the time column
    flow.net_mut(Side::Q, 1).unwrap().net.layers_mut()[0].weight.row_mut(2).fill(0.0);
    flow
}
