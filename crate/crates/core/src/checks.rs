//! Self-checks shared by the `check` command and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::loss::{
    identity_defect_with_sign, loss_and_gradient, loss_value, BoundaryTangent, LossError,
    NitscheWeights,
};
use crate::network::{init_parameters, NetworkConfig, ResNet};
use crate::problems::{
    registry_get, verify_problem, Coefficient, Operator, Problem, ProblemDefinition, VerifyReport,
};
use crate::sampling::{radical_inverse, BatchSampler, BoundaryPatch, DomainGeometry};

/// Central-difference step for gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Parameter counts of the three network sizes used in the experiments.
pub const PAPER_PARAM_COUNTS: [(usize, usize, usize, usize); 3] =
    [(2, 10, 5, 1141), (20, 50, 5, 26601), (100, 100, 5, 111201)];

/// `(base, index, numerator, denominator)` for bases 2 and 3, indices 1–8.
pub const HALTON_TABLE: [(u64, u64, u64, u64); 16] = [
    (2, 1, 1, 2),
    (2, 2, 1, 4),
    (2, 3, 3, 4),
    (2, 4, 1, 8),
    (2, 5, 5, 8),
    (2, 6, 3, 8),
    (2, 7, 7, 8),
    (2, 8, 1, 16),
    (3, 1, 1, 3),
    (3, 2, 2, 3),
    (3, 3, 1, 9),
    (3, 4, 4, 9),
    (3, 5, 7, 9),
    (3, 6, 2, 9),
    (3, 7, 5, 9),
    (3, 8, 8, 9),
];

/// Mismatches between `radical_inverse` and [`HALTON_TABLE`].
pub fn halton_mismatches() -> Vec<(u64, u64, f64, f64)> {
    HALTON_TABLE
        .iter()
        .filter_map(|&(b, i, num, den)| {
            let want = num as f64 / den as f64;
            let got = radical_inverse(i, b);
            (got != want).then_some((b, i, got, want))
        })
        .collect()
}

/// Mismatches between `param_count` and [`PAPER_PARAM_COUNTS`].
pub fn param_count_mismatches() -> Vec<(usize, usize, usize, usize, usize)> {
    PAPER_PARAM_COUNTS
        .iter()
        .filter_map(|&(d, m, l, want)| {
            let got = NetworkConfig { input_dim: d, width: m, blocks: l }.param_count();
            (got != want).then_some((d, m, l, got, want))
        })
        .collect()
}

/// Bivariate polynomial of degree at most three.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cubic(pub [f64; 10]);

impl Cubic {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self(std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
    }

    pub fn eval(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let c = &self.0;
        let (a, b) = (x[0], x[1]);
        let v = c[0]
            + c[1] * a
            + c[2] * b
            + c[3] * a * a
            + c[4] * a * b
            + c[5] * b * b
            + c[6] * a * a * a
            + c[7] * a * a * b
            + c[8] * a * b * b
            + c[9] * b * b * b;
        let da = c[1] + 2.0 * c[3] * a + c[4] * b + 3.0 * c[6] * a * a + 2.0 * c[7] * a * b
            + c[8] * b * b;
        let db = c[2] + c[4] * a + 2.0 * c[5] * b + c[7] * a * a + 2.0 * c[8] * a * b
            + 3.0 * c[9] * b * b;
        (v, vec![da, db])
    }
}

/// Largest `|Ĩ[u−v] − Ĩ[u] − I[v]|` on mixed2d over `count` random cubics.
/// `sign = -1` flips every conormal term.
pub fn identity_check(count: usize, seed: u64, sign: f64) -> Result<f64, LossError> {
    let problem = registry_get("mixed2d", None).expect("registered");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let v = Cubic::random(&mut rng);
        let beta = rng.gen_range(10.0..5000.0);
        let defect = identity_defect_with_sign(&problem, &|x| v.eval(x), beta, 32, sign)?;
        worst = worst.max(defect);
    }
    Ok(worst)
}

/// Every registered problem, with each p value used in the experiments.
pub fn registered_problems() -> Vec<ProblemDefinition> {
    let mut out = vec![
        registry_get("mixed2d", None),
        registry_get("crack2d", None),
    ];
    for p in [1.2, 2.4, 3.6] {
        out.push(registry_get("plap_smooth", Some(p)));
    }
    for p in [2.4, 3.6, 4.8] {
        out.push(registry_get("plap_singular", Some(p)));
    }
    out.push(registry_get("dirichlet20d", None));
    out.push(registry_get("dirichlet100d", None));
    out.into_iter().map(|p| p.expect("registered")).collect()
}

pub fn verify_all(n_points: usize) -> Vec<VerifyReport> {
    registered_problems()
        .iter()
        .map(|p| verify_problem(p, n_points))
        .collect()
}

/// Wraps a problem and adds a constant to its source term; the fault that
/// problem verification must catch.
pub struct ShiftedSource<P>(pub P, pub f64);

impl<P: Problem> Problem for ShiftedSource<P> {
    fn name(&self) -> &str {
        self.0.name()
    }
    fn geometry(&self) -> &DomainGeometry {
        self.0.geometry()
    }
    fn operator(&self) -> Operator {
        self.0.operator()
    }
    fn coefficient(&self, x: &[f64]) -> Coefficient {
        self.0.coefficient(x)
    }
    fn source(&self, x: &[f64]) -> f64 {
        self.0.source(x) + self.1
    }
    fn dirichlet(&self, patch: &BoundaryPatch, x: &[f64]) -> f64 {
        self.0.dirichlet(patch, x)
    }
    fn neumann(&self, patch: &BoundaryPatch, x: &[f64]) -> f64 {
        self.0.neumann(patch, x)
    }
    fn exact_u(&self, x: &[f64]) -> f64 {
        self.0.exact_u(x)
    }
    fn exact_grad(&self, x: &[f64]) -> Vec<f64> {
        self.0.exact_grad(x)
    }
    fn singular_point(&self) -> Option<Vec<f64>> {
        self.0.singular_point()
    }
    fn fd_safe(&self, x: &[f64], h: f64) -> bool {
        self.0.fd_safe(x, h)
    }
}

/// Result of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub problem: String,
    /// `max |∂L/∂θ − FD| / max |FD|` over all parameters.
    pub parameter_error: f64,
    /// Same measure for `∇ₓû` from tangents against FD in `x`, over the
    /// batch points.
    pub spatial_error: f64,
}

impl GradientCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.parameter_error <= tol && self.spatial_error <= tol
    }
}

fn relative_inf(exact: &[f64], fd: &[f64]) -> f64 {
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = exact
        .iter()
        .zip(fd)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        err
    } else {
        err / scale
    }
}

/// Reverse-mode parameter gradient and forward-mode spatial gradient of the
/// assembled loss against central differences.
pub fn gradient_check(
    problem: &dyn Problem,
    network: NetworkConfig,
    seed: u64,
    n_interior: usize,
    n_boundary: usize,
    beta: f64,
) -> Result<GradientCheck, LossError> {
    let net = ResNet::new(network)?;
    let params = init_parameters(&network, seed);
    let mut sampler = BatchSampler::new(problem.geometry());
    // skip a seed-dependent number of batches so triples differ in points too
    for _ in 0..seed % 7 {
        sampler.next_batch(n_interior, n_boundary);
    }
    let batch = sampler.next_batch(n_interior, n_boundary);
    let weights = NitscheWeights::new(beta, problem.geometry())?;
    let (_, grad) = loss_and_gradient(
        problem,
        &net,
        &params,
        &batch,
        &weights,
        BoundaryTangent::Full,
    )?;
    let mut fd = vec![0.0; params.len()];
    let mut p = params.clone();
    for (k, slot) in fd.iter_mut().enumerate() {
        let orig = p[k];
        p[k] = orig + FD_STEP;
        let up = loss_value(problem, &net, &p, &batch, &weights)?.total;
        p[k] = orig - FD_STEP;
        let down = loss_value(problem, &net, &p, &batch, &weights)?.total;
        p[k] = orig;
        *slot = (up - down) / (2.0 * FD_STEP);
    }
    let parameter_error = relative_inf(&grad, &fd);

    let d = problem.dim();
    let mut tangents = Vec::new();
    let mut fd_x = Vec::new();
    let points = batch
        .interior
        .chunks(d)
        .chain(batch.boundary.iter().flat_map(|s| s.points.chunks(d)));
    for x in points {
        let mut tape = Tape::new(d, params.len());
        let leaves = net.register(&mut tape, &params)?;
        let u = net.forward_point(&mut tape, &leaves, x)?;
        tangents.extend_from_slice(tape.tangent(u));
        let mut y = x.to_vec();
        for i in 0..d {
            y[i] = x[i] + FD_STEP;
            let up = net.eval(&params, &y);
            y[i] = x[i] - FD_STEP;
            let down = net.eval(&params, &y);
            y[i] = x[i];
            fd_x.push((up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(GradientCheck {
        problem: problem.name().to_string(),
        parameter_error,
        spatial_error: relative_inf(&tangents, &fd_x),
    })
}

/// The twenty (problem, parameters, batch) triples of the gradient check.
pub fn gradient_check_suite() -> Result<Vec<GradientCheck>, LossError> {
    let cases: [(&str, Option<f64>, f64); 5] = [
        ("mixed2d", None, 2000.0),
        ("crack2d", None, 500.0),
        ("plap_smooth", Some(3.6), 1000.0),
        ("plap_singular", Some(4.8), 6000.0),
        ("dirichlet20d", None, 50.0),
    ];
    let mut out = Vec::new();
    for seed in 0..4u64 {
        for &(name, p, beta) in &cases {
            let problem = registry_get(name, p).expect("registered");
            let d = problem.dim();
            let width = [3, 4, 5, 6][seed as usize];
            let network = NetworkConfig::new(d, width, 1 + seed as usize % 2)?;
            let (ni, nb) = if d > 2 { (4, 1) } else { (12, 4) };
            let mut check = gradient_check(&problem, network, 100 + seed, ni, nb, beta)?;
            check.problem = problem.to_string();
            out.push(check);
        }
    }
    Ok(out)
}
