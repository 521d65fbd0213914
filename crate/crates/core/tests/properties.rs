use proptest::prelude::*;

use nodeadj::checkpoint::{audit_schedule, dp_optimal_count, revolve_count, revolve_schedule};
use nodeadj::field::Affine;
use nodeadj::linalg::dot;
use nodeadj::nn::MlpModel;
use nodeadj::{
    grad, Activation, CheckpointPolicy, Counters, Integrator, LossKind, LossSpec, MlpSpec, Scheme, StepController,
    VectorField,
};

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![
        Just(Activation::Tanh),
        Just(Activation::Gelu),
        Just(Activation::Relu),
        Just(Activation::Identity)
    ]
}

fn model(dim: usize, width: usize, depth: usize, act: Activation, seed: u64) -> MlpModel<f64> {
    MlpModel::init(MlpSpec::with_hidden(dim, width, depth, act, false), seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vjp_is_linear_in_cotangent(
        seed in 0u64..1000,
        act in activation(),
        u in prop::collection::vec(-2.0f64..2.0, 3),
        v1 in prop::collection::vec(-1.0f64..1.0, 3),
        v2 in prop::collection::vec(-1.0f64..1.0, 3),
        c in -3.0f64..3.0,
    ) {
        let f = model(3, 6, 2, act, seed);
        let (_, cache) = f.eval(&u, 0.0).unwrap();
        let combo: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a + c * b).collect();
        let lhs = f.vjp_input(&cache, &combo).unwrap();
        let g1 = f.vjp_input(&cache, &v1).unwrap();
        let g2 = f.vjp_input(&cache, &v2).unwrap();
        for i in 0..3 {
            let rhs = g1[i] + c * g2[i];
            prop_assert!((lhs[i] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn jvp_and_vjp_are_adjoint(
        seed in 0u64..1000,
        act in activation(),
        u in prop::collection::vec(-2.0f64..2.0, 4),
        v in prop::collection::vec(-1.0f64..1.0, 4),
        w in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let f = model(4, 7, 3, act, seed);
        let (_, cache) = f.eval(&u, 0.0).unwrap();
        let a = dot(&v, &f.jvp(&cache, &w).unwrap());
        let b = dot(&f.vjp_input(&cache, &v).unwrap(), &w);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn activation_derivative_matches_central_difference(x in -4.0f64..4.0, act in activation()) {
        prop_assume!(act != Activation::Relu || x.abs() > 1e-3);
        let eps = 1e-6;
        let fd = (act.apply(x + eps) - act.apply(x - eps)) / (2.0 * eps);
        prop_assert!((fd - act.derivative(x)).abs() <= 1e-8, "{act:?} at {x}");
    }

    #[test]
    fn revolve_count_matches_dp_and_is_monotone(nt in 1usize..80, nc in 1usize..25) {
        let p = revolve_count(nt, nc);
        prop_assert_eq!(p, dp_optimal_count(nt, nc));
        prop_assert!(revolve_count(nt, nc + 1) <= p);
        prop_assert!(revolve_count(nt + 1, nc) >= p);
    }

    #[test]
    fn revolve_schedule_respects_budget(nt in 1usize..60, nc in 1usize..12) {
        let audit = audit_schedule(nt, nc, &revolve_schedule(nt, nc)).unwrap();
        prop_assert!(audit.max_slots <= nc);
        prop_assert_eq!(audit.recomputed_steps, revolve_count(nt, nc));
    }

    #[test]
    fn revolve_gradient_equals_store_all(nt in 2usize..14, nc_frac in 0.0f64..1.0, seed in 0u64..100) {
        let nc = 1 + ((nt - 1) as f64 * nc_frac) as usize;
        let f = model(2, 5, 2, Activation::Tanh, seed);
        let integ = Integrator::new(Scheme::Midpoint.method(), StepController::fixed(nt));
        let loss = LossSpec::terminal(LossKind::Mse, 1.0, vec![0.2, -0.4]);
        let u0 = [0.5, 0.1];
        let a = grad(&f, &integ, &loss, &u0, 0.0, CheckpointPolicy::StoreAll).unwrap();
        let b = grad(&f, &integ, &loss, &u0, 0.0, CheckpointPolicy::Revolve { capacity: nc }).unwrap();
        for (x, y) in a.grad_theta.iter().zip(&b.grad_theta).chain(a.grad_u0.iter().zip(&b.grad_u0)) {
            prop_assert!((x - y).abs() <= 1e-13 * x.abs().max(1e-300));
        }
        prop_assert_eq!(b.counters.steps_recomputed, revolve_count(nt, nc));
    }

    /// Damped rotations `a +- ib` with `a <= 0`: A-stable schemes never grow
    /// the state, whatever the step size.
    #[test]
    fn implicit_schemes_are_a_stable(a in -50.0f64..0.0, b in -50.0f64..50.0, h in 0.01f64..10.0,
                                     u in prop::collection::vec(-1.0f64..1.0, 2)) {
        let field = Affine::new(2, vec![a, -b, b, a], vec![0.0, 0.0]).unwrap();
        let n0 = dot(&u, &u).sqrt();
        for scheme in [Scheme::Beuler, Scheme::Cn] {
            let integ = Integrator::new(scheme.method(), StepController::fixed(1));
            let rec = integ.step(&field, 0, &u, 0.0, h, &mut Counters::default()).unwrap();
            let n1 = dot(&rec.u_next, &rec.u_next).sqrt();
            prop_assert!(n1 <= n0 * (1.0 + 1e-9) + 1e-12, "{scheme}: {n0} -> {n1}");
        }
    }

    #[test]
    fn model_json_round_trip(seed in any::<u64>(), act in activation()) {
        let m = model(3, 4, 2, act, seed);
        let back = MlpModel::<f64>::from_json(&m.to_json().unwrap()).unwrap();
        prop_assert_eq!(back.theta(), m.theta());
        prop_assert_eq!(back.spec(), m.spec());
    }
}
