//! Invariants that need whole-system setups: finite-difference checks of
//! both autodiff directions, metric point-count stability and descent.

use nitsche::autodiff::Tape;
use nitsche::checks::{registered_problems, Cubic, FD_STEP};
use nitsche::cli::presets::preset;
use nitsche::loss::{loss_and_gradient, loss_value, BoundaryTangent, NitscheWeights};
use nitsche::metrics::ErrorEvaluator;
use nitsche::network::{init_parameters, NetworkConfig, ResNet};
use nitsche::optimizer::{train, TrainingSchedule, TrainingSetup};
use nitsche::problems::{registry_get, Problem};
use nitsche::sampling::BatchSampler;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn relative_inf(got: &[f64], want: &[f64]) -> f64 {
    let diff = got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = want.iter().map(|v| v.abs()).fold(0.0, f64::max);
    diff / scale.max(f64::MIN_POSITIVE)
}

fn random_interior_point(problem: &dyn Problem, rng: &mut impl Rng) -> Vec<f64> {
    let geometry = problem.geometry();
    let (lo, hi) = geometry.bounds();
    loop {
        let x: Vec<f64> = (0..geometry.dim()).map(|_| rng.gen_range(lo..hi)).collect();
        if geometry.contains_interior(&x) {
            return x;
        }
    }
}

/// Network configuration the experiments use for `problem`.
fn paper_network(problem: &dyn Problem) -> NetworkConfig {
    let d = problem.geometry().dim();
    let width = match d {
        2 => 10,
        20 => 50,
        _ => 100,
    };
    NetworkConfig::new(d, width, 5).unwrap()
}

#[test]
fn forward_tangent_matches_central_differences_for_every_problem() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for problem in registered_problems() {
        let config = paper_network(&problem);
        let net = ResNet::new(config).unwrap();
        let params = init_parameters(&config, 3);
        let d = config.input_dim;
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let x = random_interior_point(&problem, &mut rng);
            let mut tape = Tape::new(d, params.len());
            let leaves = net.register(&mut tape, &params).unwrap();
            let u = net.forward_point(&mut tape, &leaves, &x).unwrap();
            let fd: Vec<f64> = (0..d)
                .map(|i| {
                    let (mut a, mut b) = (x.clone(), x.clone());
                    a[i] += FD_STEP;
                    b[i] -= FD_STEP;
                    (net.eval(&params, &a) - net.eval(&params, &b)) / (2.0 * FD_STEP)
                })
                .collect();
            worst = worst.max(relative_inf(tape.tangent(u), &fd));
        }
        assert!(worst <= TOL, "{problem}: tangent vs differences {worst:.2e}");
    }
}

#[test]
fn reverse_gradient_matches_central_differences_on_unit_box_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for problem in registered_problems() {
        let d = problem.geometry().dim();
        if d > 2 {
            continue;
        }
        let config = NetworkConfig::new(d, 3, 2).unwrap();
        let net = ResNet::new(config).unwrap();
        let batch = BatchSampler::new(problem.geometry()).next_batch(12, 6);
        let w = NitscheWeights::new(800.0, problem.geometry()).unwrap();
        for _ in 0..3 {
            let params: Vec<f64> = (0..config.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, grad) =
                loss_and_gradient(&problem, &net, &params, &batch, &w, BoundaryTangent::Full).unwrap();
            let fd: Vec<f64> = (0..params.len())
                .map(|k| {
                    let (mut a, mut b) = (params.clone(), params.clone());
                    a[k] += FD_STEP;
                    b[k] -= FD_STEP;
                    let fa = loss_value(&problem, &net, &a, &batch, &w).unwrap().total;
                    let fb = loss_value(&problem, &net, &b, &batch, &w).unwrap().total;
                    (fa - fb) / (2.0 * FD_STEP)
                })
                .collect();
            let err = relative_inf(&grad, &fd);
            assert!(err <= TOL, "{problem}: backward vs differences {err:.2e}");
        }
    }
}

#[test]
fn l2_error_is_stable_under_doubling_the_point_count() {
    let problem = registry_get("mixed2d", None).unwrap();
    let small = ErrorEvaluator::new(&problem, 100_000).unwrap();
    let large = ErrorEvaluator::new(&problem, 200_000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let cubic = Cubic::random(&mut rng);
        // approximation u - q has error q
        let approx = |x: &[f64]| {
            let (q, gq) = cubic.eval(x);
            let gu = problem.exact_grad(x);
            (problem.exact_u(x) - q, gu.iter().zip(&gq).map(|(a, b)| a - b).collect())
        };
        let a = small.evaluate_fn(approx).e_l2;
        let b = large.evaluate_fn(approx).e_l2;
        assert!((a - b).abs() <= 0.02 * b, "{a} vs {b}");
    }
}

#[test]
fn loss_moving_average_decreases_over_first_5000_epochs() {
    let problem = registry_get("mixed2d", None).unwrap();
    let c = preset("mixed2d_beta2000").unwrap();
    let setup = TrainingSetup {
        network: NetworkConfig::new(2, c.width, c.blocks).unwrap(),
        schedule: TrainingSchedule {
            epochs: 5000,
            n_interior: c.n_interior,
            n_boundary: c.n_boundary,
            eval_every: 5000,
        },
        beta: c.beta,
        seed: c.seed,
        learning_rate: c.learning_rate,
        eval_points: 100,
    };
    let losses = train(&problem, &setup).unwrap().record.epoch_losses;
    let means: Vec<f64> = losses[..5000]
        .chunks_exact(500)
        .map(|w| w.iter().sum::<f64>() / 500.0)
        .collect();
    assert!(means.windows(2).all(|w| w[1] <= w[0]), "{means:?}");
}
