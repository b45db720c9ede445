//! Property tests for invariants that hold for arbitrary inputs.

use nitsche::autodiff::Tape;
use nitsche::cli::config::RunConfig;
use nitsche::loss::{loss_and_gradient, loss_value, BoundaryTangent, NitscheWeights};
use nitsche::metrics::ErrorEvaluator;
use nitsche::network::{init_parameters, NetworkConfig, ResNet};
use nitsche::optimizer::{adam_step, AdamState, Checkpoint};
use nitsche::problems::{registry_get, Problem};
use nitsche::sampling::{radical_inverse, BatchSampler, HaltonStream};
use proptest::prelude::*;

fn digits_reversed(mut index: u64, base: u64) -> (u128, u128) {
    let (mut num, mut den) = (0u128, 1u128);
    while index > 0 {
        num = num * base as u128 + (index % base) as u128;
        den *= base as u128;
        index /= base;
    }
    (num, den)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn radical_inverse_is_exact_rational_in_unit_interval(index in 1u64..1_000_000_000, k in 0usize..25) {
        let base = nitsche::sampling::first_primes(25)[k];
        let v = radical_inverse(index, base);
        prop_assert!(v > 0.0 && v < 1.0);
        let (num, den) = digits_reversed(index, base);
        // v·den recovers the integer numerator exactly when den is small
        if den < (1u128 << 53) {
            prop_assert_eq!(v, num as f64 / den as f64);
            prop_assert!((v * den as f64 - num as f64).abs() <= 0.5);
        }
    }

    #[test]
    fn halton_points_stay_inside_geometry(skip in 0usize..500, which in 0usize..3) {
        let name = ["mixed2d", "crack2d", "dirichlet20d"][which];
        let problem = registry_get(name, None).unwrap();
        let geometry = problem.geometry();
        let mut sampler = BatchSampler::new(geometry);
        for _ in 0..skip % 5 {
            sampler.next_batch(7, 3);
        }
        let batch = sampler.next_batch(16, 4);
        for x in batch.interior.chunks(batch.dim) {
            prop_assert!(geometry.contains_interior(x));
        }
        for s in &batch.boundary {
            let patch = geometry.patch(s.patch_id).unwrap();
            for x in s.points.chunks(batch.dim) {
                prop_assert!(patch.contains(x));
            }
        }
        let mut stream = HaltonStream::new(3);
        for _ in 0..skip {
            stream.next_point();
        }
        prop_assert!(stream.next_point().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn tape_and_replica_agree_bitwise(seed in any::<u64>(), x in proptest::array::uniform2(-1.0f64..1.0), width in 1usize..6, blocks in 1usize..3) {
        let config = NetworkConfig::new(2, width, blocks).unwrap();
        let net = ResNet::new(config).unwrap();
        let params = init_parameters(&config, seed);
        let mut tape = Tape::new(2, params.len());
        let leaves = net.register(&mut tape, &params).unwrap();
        let u = net.forward_point(&mut tape, &leaves, &x).unwrap();
        let (v, g) = net.eval_with_grad(&params, &x);
        prop_assert_eq!(tape.value(u), v);
        prop_assert_eq!(tape.tangent(u), g.as_slice());
        prop_assert_eq!(tape.replay()[u.node_id()], v);
    }

    #[test]
    fn backward_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let config = NetworkConfig::new(2, 3, 1).unwrap();
        let net = ResNet::new(config).unwrap();
        let params = init_parameters(&config, seed);
        let mut tape = Tape::new(2, params.len());
        let leaves = net.register(&mut tape, &params).unwrap();
        let u = net.forward_point(&mut tape, &leaves, &[0.3, -0.2]).unwrap();
        let w = net.forward_point(&mut tape, &leaves, &[-0.7, 0.5]).unwrap();
        let (su, sw) = (tape.scale(u, a), tape.scale(w, b));
        let combo = tape.add(su, sw);
        let gu = tape.backward(u).unwrap();
        let gw = tape.backward(w).unwrap();
        let gc = tape.backward(combo).unwrap();
        for k in 0..params.len() {
            let want = a * gu[k] + b * gw[k];
            prop_assert!((gc[k] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn breakdown_adds_up_and_routes_agree(seed in any::<u64>(), beta in 1.0f64..5000.0, which in 0usize..3) {
        let (name, p) = [("mixed2d", None), ("crack2d", None), ("plap_smooth", Some(2.4))][which];
        let problem = registry_get(name, p).unwrap();
        let config = NetworkConfig::new(2, 3, 1).unwrap();
        let net = ResNet::new(config).unwrap();
        let params = init_parameters(&config, seed);
        let batch = BatchSampler::new(problem.geometry()).next_batch(8, 4);
        let w = NitscheWeights::new(beta, problem.geometry()).unwrap();
        let b = loss_value(&problem, &net, &params, &batch, &w).unwrap();
        prop_assert_eq!(b.total, ((b.interior + b.dirichlet_penalty) + b.dirichlet_consistency) + b.neumann);
        let (full, gf) = loss_and_gradient(&problem, &net, &params, &batch, &w, BoundaryTangent::Full).unwrap();
        let (dir, gd) = loss_and_gradient(&problem, &net, &params, &batch, &w, BoundaryTangent::Directional).unwrap();
        let tol = 1e-12 * b.total.abs().max(1.0);
        prop_assert!((full.total - b.total).abs() <= tol);
        prop_assert!((dir.total - b.total).abs() <= tol);
        let scale = gf.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (x, y) in gf.iter().zip(gd.iter()) {
            prop_assert!((x - y).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn adam_first_step_moves_against_gradient(g in proptest::collection::vec(-1e3f64..1e3, 1..20), lr in 1e-5f64..1e-1) {
        let mut state = AdamState::new(g.len(), lr);
        let mut p = vec![0.0; g.len()];
        adam_step(&mut state, &mut p, &g).unwrap();
        for (pi, gi) in p.iter().zip(&g) {
            if *gi != 0.0 {
                prop_assert_eq!(pi.signum(), -gi.signum());
            }
            prop_assert!(pi.abs() <= lr * (1.0 + 1e-12));
        }
    }

    #[test]
    fn checkpoint_round_trips(seed in any::<u64>(), epoch in any::<u64>(), steps in 0usize..4, with_adam in any::<bool>()) {
        let config = NetworkConfig::new(2, 3, 2).unwrap();
        let mut params = init_parameters(&config, seed).0;
        let mut adam = AdamState::new(params.len(), 1e-3);
        for s in 0..steps {
            let g: Vec<f64> = params.iter().map(|p| p * (s as f64 + 1.0) - 0.1).collect();
            adam_step(&mut adam, &mut params, &g).unwrap();
        }
        let c = Checkpoint { config, seed, epoch, params, adam: with_adam.then_some(adam) };
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        prop_assert_eq!(Checkpoint::read_from(&mut buf.as_slice()).unwrap(), c);
    }

    #[test]
    fn relative_errors_satisfy_triangle_inequality(s1 in any::<u64>(), s2 in any::<u64>()) {
        let problem = registry_get("mixed2d", None).unwrap();
        let config = NetworkConfig::new(2, 4, 1).unwrap();
        let net = ResNet::new(config).unwrap();
        let (a, b) = (init_parameters(&config, s1), init_parameters(&config, s2));
        let ev = ErrorEvaluator::new(&problem, 500).unwrap();
        let ea = ev.evaluate(&net, &a).e_l2;
        let eb = ev.evaluate(&net, &b).e_l2;
        let (mut diff, mut norm) = (0.0, 0.0);
        for x in ev.points().chunks(2) {
            diff += (net.eval(&a, x) - net.eval(&b, x)).powi(2);
            norm += problem.exact_u(x).powi(2);
        }
        let dist = (diff / norm).sqrt();
        prop_assert!(ea <= eb + dist + 1e-12);
        prop_assert!(eb <= ea + dist + 1e-12);
    }

    #[test]
    fn config_text_round_trips(
        preset in 0usize..30,
        seed in any::<u64>(),
        lr in 1e-6f64..1.0,
        width in 1usize..200,
        blocks in 1usize..8,
        epochs in 0usize..100_000,
        eval_every in 1usize..1000,
    ) {
        let name = &nitsche::cli::presets::preset_names()[preset];
        let mut c = nitsche::cli::presets::preset(name).unwrap();
        c.seed = seed;
        c.learning_rate = lr;
        c.width = width;
        c.blocks = blocks;
        c.epochs = epochs;
        c.eval_every = eval_every;
        prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn param_count_matches_layout_enumeration(d in 1usize..120, m in 1usize..120, l in 1usize..8) {
        let config = NetworkConfig::new(d, m, l).unwrap();
        let layout = config.layout();
        let mut offset = 0;
        for a in layout.affines() {
            prop_assert_eq!(a.weight, offset);
            prop_assert_eq!(a.bias, offset + a.rows * a.cols);
            offset = a.bias + a.rows;
        }
        prop_assert_eq!(layout.affines().count(), 2 * l + 2);
        prop_assert_eq!(offset, layout.len);
        prop_assert_eq!(config.param_count(), offset);
        prop_assert_eq!(init_parameters(&config, 0).len(), offset);
    }
}
