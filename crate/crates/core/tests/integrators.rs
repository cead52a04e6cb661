mod common;

use common::*;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use verletflow::integrators::{hutchinson_trace, integrate_state};
use verletflow::{integrate, IntegratorConfig, LinearForm, Method, PhaseBatch, PhaseState, Side, VerletFlow};

fn set_weight(flow: &mut VerletFlow, side: Side, k: usize, layer: usize, w: Array2<f64>) {
    flow.net_mut(side, k).unwrap().net.layers_mut()[layer].weight = w;
}

#[test]
fn composed_map_log_det_matches_finite_differences() {
    let cfg = IntegratorConfig::forward(100, Method::TaylorVerlet);
    for seed in 0..3 {
        let flow = random_flow(seed, 1, &[64, 64, 64]);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        for _ in 0..3 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
            let out = integrate_state(&flow, &split(&x, 0.0), &cfg).unwrap();
            let map = |y: &[f64]| flat(&integrate_state(&flow, &split(y, 0.0), &cfg).unwrap());
            let fd = log_abs_det(fd_jacobian(map, &x, 1e-5));
            // dlogp is the change in log-density, i.e. minus the log-det
            assert!((out.dlogp + fd).abs() < 1e-4, "seed {seed}: {} vs {}", -out.dlogp, fd);
        }
    }
}

#[test]
fn forward_then_reverse_restores_the_state() {
    for (seed, order) in [(1, 1), (2, 2), (3, 3)] {
        let flow = random_flow(seed, order, &[32, 32]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = ndarray::Array2::from_shape_fn((64, 2), |_| rng.random_range(-1.0..1.0));
        let p = ndarray::Array2::from_shape_fn((64, 2), |_| rng.random_range(-1.0..1.0));
        let start = PhaseBatch::new(q.clone(), p.clone(), 0.0).unwrap();
        let fwd = integrate(&flow, &start, &IntegratorConfig::forward(100, Method::TaylorVerlet)).unwrap();
        let back = integrate(&flow, &fwd.batch, &IntegratorConfig::reverse(100, Method::TaylorVerlet)).unwrap();
        let b = back.batch;
        assert_eq!(b.t, 0.0);
        let dq = (&b.q - &q).mapv(f64::abs).fold(0.0f64, |a, v| a.max(*v));
        let dp = (&b.p - &p).mapv(f64::abs).fold(0.0f64, |a, v| a.max(*v));
        let dl = b.dlogp.mapv(f64::abs).fold(0.0f64, |a, v| a.max(*v));
        assert!(dq < 1e-8 && dp < 1e-8 && dl < 1e-8, "order {order}: {dq:e} {dp:e} {dl:e}");
    }
}

#[test]
fn frozen_p_linear_flow_is_integrated_exactly() {
    let flow = frozen_p_flow(9);
    let s1_net = flow.net(Side::Q, 1).unwrap().net.clone();

    let (t0, t1) = (0.1, 0.85);
    let q0 = vec![0.7, -1.3];
    let p0 = vec![0.4, 1.1];
    let s1 = s1_net.forward(&[p0[0], p0[1], 0.0]).unwrap();
    let expect_q: Vec<f64> = q0.iter().zip(&s1).map(|(q, s)| ((t1 - t0) * s).exp() * q).collect();
    let expect_dlogp = -(t1 - t0) * s1.iter().sum::<f64>();
    for steps in [1, 10, 100] {
        let cfg = IntegratorConfig { t0, t1, ..IntegratorConfig::forward(steps, Method::TaylorVerlet) };
        let out = integrate_state(&flow, &PhaseState::new(q0.clone(), p0.clone(), t0).unwrap(), &cfg).unwrap();
        for (a, b) in out.q.iter().zip(&expect_q) {
            assert!((a - b).abs() < 1e-10, "steps {steps}: {a} vs {b}");
        }
        assert_eq!(out.p, p0);
        assert!((out.dlogp - expect_dlogp).abs() < 1e-10, "steps {steps}");
        assert!((out.t - t1).abs() < 1e-15);
    }
}

fn max_q_error(flow: &VerletFlow, batch: &PhaseBatch, reference: &PhaseBatch, steps: usize) -> f64 {
    let out = integrate(flow, batch, &IntegratorConfig::forward(steps, Method::TaylorVerlet)).unwrap().batch;
    let dq = (&out.q - &reference.q).mapv(f64::abs).fold(0.0f64, |a, v| a.max(*v));
    let dp = (&out.p - &reference.p).mapv(f64::abs).fold(0.0f64, |a, v| a.max(*v));
    dq.max(dp)
}

#[test]
fn taylor_verlet_converges_at_first_order() {
    let flow = random_flow(4, 2, &[32, 32]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = ndarray::Array2::from_shape_fn((16, 2), |_| rng.random_range(-1.0..1.0));
    let p = ndarray::Array2::from_shape_fn((16, 2), |_| rng.random_range(-1.0..1.0));
    let batch = PhaseBatch::new(q, p, 0.0).unwrap();
    let reference = integrate(&flow, &batch, &IntegratorConfig::forward(10_000, Method::Rk4Exact)).unwrap().batch;
    let errors: Vec<f64> = [10, 100, 1000].iter().map(|&s| max_q_error(&flow, &batch, &reference, s)).collect();
    for w in errors.windows(2) {
        let order = (w[0] / w[1]).log10();
        assert!(order >= 1.0, "errors {errors:?}, observed order {order}");
    }
}

/// Constant linear field `dx/dt = A x + b` built from single-layer nets.
fn linear_field_flow(a: &[[f64; 4]; 4]) -> VerletFlow {
    let mut flow = VerletFlow::zeros(2, 2, 1, &[], LinearForm::Dense).unwrap();
    for (side, rows, cols) in [(Side::Q, 0..2, 2..4), (Side::P, 2..4, 0..2)] {
        // order 0: opposite-side block, input is [other, t]
        let mut w = Array2::zeros((3, 2));
        for (i, r) in rows.clone().enumerate() {
            for (j, c) in cols.clone().enumerate() {
                w[[j, i]] = a[r][c];
            }
        }
        set_weight(&mut flow, side, 0, 0, w);
        set_bias(&mut flow, side, 0, &[0.25, -0.5]);
        // order 1: same-side block, row-major dense
        let block: Vec<f64> = rows.clone().flat_map(|r| rows.clone().map(move |c| a[r][c])).collect();
        set_bias(&mut flow, side, 1, &block);
    }
    flow
}

#[test]
fn rk4_linear_field_log_density_change_is_minus_trace() {
    let a = [
        [0.3, -0.7, 0.2, 0.5],
        [0.4, -0.2, -0.6, 0.1],
        [0.9, 0.3, 0.5, -0.4],
        [-0.2, 0.8, 0.3, -0.9],
    ];
    let tr: f64 = (0..4).map(|i| a[i][i]).sum();
    let flow = linear_field_flow(&a);
    let start = PhaseState::new(vec![0.5, -0.2], vec![1.0, 0.3], 0.2).unwrap();
    for method in [Method::Rk4Exact, Method::Rk4Hutchinson] {
        let cfg = IntegratorConfig { t0: 0.2, t1: 0.9, ..IntegratorConfig::forward(7, method) };
        let out = integrate_state(&flow, &start, &cfg).unwrap();
        if method == Method::Rk4Exact {
            assert!((out.dlogp + 0.7 * tr).abs() < 1e-9, "{} vs {}", out.dlogp, -0.7 * tr);
        }
        assert!(out.dlogp.is_finite());
    }
    let field = flow.eval_field(&start).unwrap();
    let x = [0.5, -0.2, 1.0, 0.3];
    let expect: Vec<f64> = (0..4).map(|i| (0..4).map(|j| a[i][j] * x[j]).sum::<f64>()).collect();
    let got: Vec<f64> = field.0.iter().chain(&field.1).copied().collect();
    for i in 0..4 {
        let bias = if i % 2 == 0 { 0.25 } else { -0.5 };
        assert!((got[i] - expect[i] - bias).abs() < 1e-14);
    }
}

#[test]
fn hutchinson_estimate_is_unbiased() {
    let a = [
        [1.0, 2.0, -0.5, 0.3],
        [-1.5, 0.5, 0.7, 2.0],
        [0.2, -0.8, -2.0, 1.1],
        [0.9, 0.4, -1.2, 0.25],
    ];
    let tr: f64 = (0..4).map(|i| a[i][i]).sum();
    // Var(εᵀAε) = Σ_{i≠j} a_ij (a_ij + a_ji) for Rademacher ε
    let mut var = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                var += a[i][j] * (a[i][j] + a[j][i]);
            }
        }
    }
    let n = 1_000_000;
    let se = (var / n as f64).sqrt();
    let jvp = |v: &[f64]| (0..4).map(|i| (0..4).map(|j| a[i][j] * v[j]).sum()).collect();
    let est = hutchinson_trace(jvp, 4, n, &mut ChaCha8Rng::seed_from_u64(3));
    assert!((est - tr).abs() < 3.0 * se, "{est} vs {tr} (se {se})");
    let again = hutchinson_trace(jvp, 4, n, &mut ChaCha8Rng::seed_from_u64(3));
    assert_eq!(est.to_bits(), again.to_bits());
}

#[test]
fn hutchinson_and_exact_share_trajectories() {
    let flow = random_flow(5, 1, &[16]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = ndarray::Array2::from_shape_fn((8, 2), |_| rng.random_range(-1.0..1.0));
    let p = ndarray::Array2::from_shape_fn((8, 2), |_| rng.random_range(-1.0..1.0));
    let batch = PhaseBatch::new(q, p, 0.0).unwrap();
    let exact = integrate(&flow, &batch, &IntegratorConfig::forward(20, Method::Rk4Exact)).unwrap();
    let hutch = integrate(&flow, &batch, &IntegratorConfig::forward(20, Method::Rk4Hutchinson).with_seed(11)).unwrap();
    assert_eq!(exact.batch.q, hutch.batch.q);
    assert_eq!(exact.batch.p, hutch.batch.p);
    assert_ne!(exact.batch.dlogp, hutch.batch.dlogp);
    assert_eq!(exact.field_evaluations, 4 * 20);
}

#[test]
fn field_evaluation_counts() {
    let flow = random_flow(6, 2, &[8]);
    let batch = PhaseBatch::new(Array2::from_elem((1, 2), 0.5), Array2::from_elem((1, 2), -0.5), 0.0).unwrap();
    let tv = integrate(&flow, &batch, &IntegratorConfig::forward(13, Method::TaylorVerlet)).unwrap();
    assert_eq!(tv.field_evaluations, 2 * 3 * 13);
    assert_eq!(tv.step_count, 13);
}

/// A flow trained for 200 epochs with the default recipe. At 100 steps the
/// first-order splitting error is larger than 1e-3: about 4e-2 in q and
/// 9e-3 in dlogp.
#[test]
#[ignore = "first-order splitting error at 100 steps exceeds 1e-3 on a trained flow"]
fn taylor_verlet_and_rk4_agree_to_1e3_on_a_trained_flow() {
    use verletflow::densities::Gmm;
    use verletflow::importance::source_batch;
    use verletflow::training::{init_flow, train, TrainConfig};
    let cfg = TrainConfig::default();
    let mut flow = init_flow(2, 2, 1, LinearForm::Diagonal, &cfg).unwrap();
    train(&mut flow, &Gmm::trimodal(), &cfg).unwrap();
    let batch = source_batch(0, 0..200, 2, 2);
    let tv = integrate(&flow, &batch, &IntegratorConfig::forward(100, Method::TaylorVerlet)).unwrap().batch;
    let rk = integrate(&flow, &batch, &IntegratorConfig::forward(100, Method::Rk4Exact)).unwrap().batch;
    let dq = (&tv.q - &rk.q).mapv(f64::abs).fold(0.0f64, |a, v| a.max(*v));
    let dl = (&tv.dlogp - &rk.dlogp).mapv(f64::abs).fold(0.0f64, |a, v| a.max(*v));
    assert!(dq < 1e-3 && dl < 1e-3, "max |dq| {dq:e}, max |dlogp| {dl:e}");
}
