use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use verletflow::couplings::{apply_as_verlet, apply_coupling, CouplingKind, CouplingLayer};
use verletflow::densities::{log_mean_exp, standard_normal_log_density, AugmentedDensity, Gmm};
use verletflow::io::{checkpoint_from_str, checkpoint_to_string};
use verletflow::operators::{apply_step, invert_step, Coefficient, OperatorStep};
use verletflow::training::nll_value;
use verletflow::{LinearForm, PhaseState, Side, VerletFlow};

fn side() -> impl Strategy<Value = Side> {
    prop_oneof![Just(Side::Q), Just(Side::P)]
}

fn away_from_zero(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0.05f64..2.0, any::<bool>()).prop_map(|(m, neg)| if neg { -m } else { m }), d)
}

fn coefficient(order: usize, d: usize) -> BoxedStrategy<Coefficient> {
    let vals = move |n| prop::collection::vec(-1.0f64..1.0, n);
    match order {
        0 => vals(d).prop_map(Coefficient::Vector).boxed(),
        1 => prop_oneof![
            vals(d).prop_map(Coefficient::Diagonal),
            vals(d * d).prop_map(Coefficient::Dense),
        ]
        .boxed(),
        _ => vals(d).prop_map(Coefficient::Sparse).boxed(),
    }
}

fn step_and_point() -> impl Strategy<Value = (OperatorStep, Vec<f64>)> {
    (0usize..=3, 1usize..=3, side(), 0.001f64..0.05).prop_flat_map(|(order, d, side, tau)| {
        (coefficient(order, d), away_from_zero(d)).prop_map(move |(c, x)| {
            (OperatorStep::new(side, order, tau, c).unwrap(), x)
        })
    })
}

proptest! {
    #[test]
    fn operator_inverse_round_trips((step, x) in step_and_point()) {
        let (y, logdet) = step.map(&x).unwrap();
        let (back, inv_logdet) = step.inverse_map(&y).unwrap();
        for (a, b) in back.iter().zip(&x) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
        prop_assert!((logdet + inv_logdet).abs() <= 1e-10);
    }

    #[test]
    fn order_zero_log_det_is_exactly_zero(
        x in prop::collection::vec(-5.0f64..5.0, 3),
        s in prop::collection::vec(-5.0f64..5.0, 3),
        tau in -1.0f64..1.0,
    ) {
        let step = OperatorStep::new(Side::Q, 0, tau, Coefficient::Vector(s.clone())).unwrap();
        let (y, logdet) = step.map(&x).unwrap();
        prop_assert_eq!(logdet, 0.0);
        for i in 0..3 {
            prop_assert_eq!(y[i], x[i] + tau * s[i]);
        }
    }

    #[test]
    fn steps_leave_the_other_side_and_time_alone((step, x) in step_and_point(), other in away_from_zero(2), t in 0.0f64..1.0) {
        let (q, p) = match step.side {
            Side::Q => (x.clone(), other.clone()),
            Side::P => (other.clone(), x.clone()),
        };
        let state = PhaseState::new(q, p, t).unwrap();
        let next = apply_step(&step, &state).unwrap();
        prop_assert_eq!(next.side(step.side.other()), state.side(step.side.other()));
        prop_assert_eq!(next.t, t);
        let back = invert_step(&step, &next).unwrap();
        prop_assert!(back.dlogp.abs() <= 1e-10);
    }

    #[test]
    fn log_mean_exp_shifts_exactly(w in prop::collection::vec(-50.0f64..50.0, 1..40), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = w.iter().map(|v| v + c).collect();
        let diff = log_mean_exp(&shifted) - log_mean_exp(&w) - c;
        prop_assert!(diff.abs() <= 1e-12 * (1.0 + c.abs()), "{diff}");
    }

    #[test]
    fn augmented_density_is_the_sum_of_parts(q in prop::collection::vec(-4.0f64..4.0, 2), p in prop::collection::vec(-4.0f64..4.0, 3)) {
        let aug = AugmentedDensity::new(Gmm::trimodal(), 3);
        prop_assert_eq!(aug.log_density(&q, &p), Gmm::trimodal().log_density(&q) + standard_normal_log_density(&p));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn checkpoints_round_trip_bit_exactly(
        seed in any::<u64>(),
        order in 0usize..4,
        dq in 1usize..4,
        dp in 1usize..4,
        hidden in prop::collection::vec(1usize..6, 0..3),
        dense in any::<bool>(),
    ) {
        let linear = if dense { LinearForm::Dense } else { LinearForm::Diagonal };
        let flow = VerletFlow::new(dq, dp, order, &hidden, linear, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let text = checkpoint_to_string(&flow);
        let back = checkpoint_from_str(&text).unwrap();
        let bits = |f: &VerletFlow| f.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&flow));
        prop_assert_eq!(checkpoint_to_string(&back), text);
    }

    #[test]
    fn loss_ignores_batch_order(seed in any::<u64>(), perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flow = VerletFlow::new(2, 2, 1, &[6], LinearForm::Diagonal, &mut rng).unwrap();
        let q = Array2::from_shape_fn((9, 2), |_| rng.random_range(-2.0..2.0));
        let p = Array2::from_shape_fn((9, 2), |_| rng.random_range(-2.0..2.0));
        let mut order: Vec<usize> = (0..9).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let qs = q.select(ndarray::Axis(0), &order);
        let ps = p.select(ndarray::Axis(0), &order);
        let a = nll_value(&flow, &q, &p, 4).unwrap();
        let b = nll_value(&flow, &qs, &ps, 4).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn couplings_equal_their_verlet_steps(
        seed in any::<u64>(),
        affine in any::<bool>(),
        on_p in any::<bool>(),
        tau in 0.001f64..2.0,
        q in prop::collection::vec(-2.0f64..2.0, 2),
        p in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let kind = if affine { CouplingKind::Affine } else { CouplingKind::Additive };
        let (side, d_self, d_other) = if on_p { (Side::P, 3, 2) } else { (Side::Q, 2, 3) };
        let layer = CouplingLayer::random(kind, side, d_self, d_other, &[8], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (q1, p1, logdet) = apply_coupling(&layer, &q, &p).unwrap();
        let state = PhaseState::new(q, p, 0.0).unwrap();
        let v = apply_as_verlet(&layer, tau, &state).unwrap();
        for (a, b) in v.q.iter().chain(&v.p).zip(q1.iter().chain(&p1)) {
            prop_assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
        prop_assert!((-v.dlogp - logdet).abs() <= 1e-10);
    }
}
