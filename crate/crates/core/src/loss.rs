//! Discrete Nitsche energy over a sample batch, and exact-quadrature
//! energies used as oracles.
//!
//! For a Dirichlet patch the per-point density is
//! `(β/2)û² − û∂_νû − g_D(βû − ∂_νû)`, for a Neumann patch `−g_N û`, and in
//! the interior `½A∇û·∇û − fû` (or `(1/p)|∇û|^p − fû`). Expanding
//! `(β/2)(g_D − v)² − (β/2)g_D²` leaves no constant, so the sampled loss is an
//! unbiased estimate of the energy itself.

use thiserror::Error;

use crate::autodiff::{AugmentedScalar, AutodiffError, GradientVector, Tape};
use crate::network::{NetworkError, ResNet};
use crate::problems::{Coefficient, Operator, Problem};
use crate::quadrature::gauss_legendre_unit;
use crate::sampling::{BoundaryPatch, Condition, DomainGeometry, PatchSamples, SampleBatch};

/// Regularisation inside `|∇v|` for the p-Laplace conormal derivative.
pub const CONORMAL_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("empty sample batch")]
    EmptyBatch,
    #[error("batch does not match problem geometry: {0}")]
    GeometryMismatch(String),
    #[error("penalty parameter must be positive, got {0}")]
    InvalidBeta(f64),
    #[error("exact energies need a two-dimensional problem, got d={0}")]
    UnsupportedDimension(usize),
    #[error("the auxiliary energy is only defined for the linear operator")]
    UnsupportedOperator,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NitscheWeights {
    pub beta: f64,
    pub volume: f64,
    pub patch_measures: Vec<f64>,
}

impl NitscheWeights {
    pub fn new(beta: f64, geometry: &DomainGeometry) -> Result<Self, LossError> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(LossError::InvalidBeta(beta));
        }
        Ok(Self {
            beta,
            volume: geometry.volume,
            patch_measures: geometry.patches.iter().map(|p| p.measure).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub interior: f64,
    pub dirichlet_penalty: f64,
    pub dirichlet_consistency: f64,
    pub neumann: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn from_parts(interior: f64, penalty: f64, consistency: f64, neumann: f64) -> Self {
        Self {
            interior,
            dirichlet_penalty: penalty,
            dirichlet_consistency: consistency,
            neumann,
            total: ((interior + penalty) + consistency) + neumann,
        }
    }
}

/// How boundary points get `∂_νû`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundaryTangent {
    /// Full spatial gradient, then the conormal formula.
    Full,
    /// For the linear operator, a single tangent seeded with `A(x)n`, which
    /// is `∂_νû` directly. Falls back to `Full` for p-Laplace.
    #[default]
    Directional,
}

/// `∂_ν v` from recorded gradient entries: `n·A∇v`, or
/// `(|∇v|² + ε²)^{(p−2)/2} n·∇v` for the p-Laplacian.
pub fn conormal(
    tape: &mut Tape,
    problem: &dyn Problem,
    grad: &[AugmentedScalar],
    n: &[f64],
    x: &[f64],
) -> Result<AugmentedScalar, LossError> {
    let normal_dot = |tape: &mut Tape, dir: &[f64]| {
        let c: Vec<AugmentedScalar> = dir.iter().map(|&v| tape.constant(v)).collect();
        tape.dot(&c, grad, None)
    };
    match problem.operator() {
        Operator::Divergence => {
            let an = problem.coefficient(x).apply(n);
            Ok(normal_dot(tape, &an))
        }
        Operator::PLaplace(p) => {
            let sq = tape.dot(grad, grad, None);
            let eps = tape.constant(CONORMAL_EPS * CONORMAL_EPS);
            let reg = tape.add(sq, eps);
            let s = tape.powf(reg, (p - 2.0) / 2.0)?;
            let dn = normal_dot(tape, n);
            Ok(tape.mul(s, dn))
        }
    }
}

/// Interior energy density `½A∇v·∇v` or `(1/p)|∇v|^p`.
fn interior_density(
    tape: &mut Tape,
    problem: &dyn Problem,
    grad: &[AugmentedScalar],
    x: &[f64],
) -> Result<AugmentedScalar, LossError> {
    match problem.operator() {
        Operator::Divergence => {
            let q = match problem.coefficient(x) {
                Coefficient::Identity => tape.dot(grad, grad, None),
                Coefficient::Dense(a) => {
                    let d = grad.len();
                    let ag: Vec<AugmentedScalar> = (0..d)
                        .map(|i| {
                            let row: Vec<AugmentedScalar> =
                                a[i * d..(i + 1) * d].iter().map(|&v| tape.constant(v)).collect();
                            tape.dot(&row, grad, None)
                        })
                        .collect();
                    tape.dot(grad, &ag, None)
                }
            };
            Ok(tape.scale(q, 0.5))
        }
        Operator::PLaplace(p) => {
            let sq = tape.dot(grad, grad, None);
            let e = tape.powf(sq, p / 2.0)?;
            Ok(tape.scale(e, 1.0 / p))
        }
    }
}

#[derive(Default)]
struct Terms {
    interior: Vec<AugmentedScalar>,
    penalty: Vec<AugmentedScalar>,
    consistency: Vec<AugmentedScalar>,
    neumann: Vec<AugmentedScalar>,
}

impl Terms {
    /// Records the four partial sums and their total.
    fn finish(&self, tape: &mut Tape) -> (AugmentedScalar, LossBreakdown) {
        let i = tape.sum(&self.interior);
        let p = tape.sum(&self.penalty);
        let c = tape.sum(&self.consistency);
        let n = tape.sum(&self.neumann);
        let ip = tape.add(i, p);
        let ipc = tape.add(ip, c);
        let total = tape.add(ipc, n);
        let breakdown = LossBreakdown::from_parts(
            tape.value(i),
            tape.value(p),
            tape.value(c),
            tape.value(n),
        );
        debug_assert_eq!(breakdown.total, tape.value(total));
        (total, breakdown)
    }
}

struct Recorder<'a> {
    problem: &'a dyn Problem,
    net: &'a ResNet,
    leaves: Vec<AugmentedScalar>,
    beta: f64,
}

impl Recorder<'_> {
    fn interior(
        &self,
        tape: &mut Tape,
        x: &[f64],
        weight: f64,
        terms: &mut Terms,
    ) -> Result<(), LossError> {
        let xs = tape.leaf_input(x)?;
        let u = self.net.forward(tape, &self.leaves, &xs)?;
        let grad = tape.tangent_entries(u)?;
        let density = interior_density(tape, self.problem, &grad, x)?;
        let fu = tape.scale(u, self.problem.source(x));
        let term = tape.sub(density, fu);
        terms.interior.push(tape.scale(term, weight));
        Ok(())
    }

    fn boundary(
        &self,
        tape: &mut Tape,
        patch: &BoundaryPatch,
        x: &[f64],
        weight: f64,
        directional: bool,
        terms: &mut Terms,
    ) -> Result<(), LossError> {
        let (u, dnu) = if directional {
            let seeds = self.problem.coefficient(x).apply(&patch.normal);
            let xs = tape.leaf_input_seeded(x, &seeds)?;
            let u = self.net.forward(tape, &self.leaves, &xs)?;
            let c = tape.tangent_entry(u, 0)?;
            (u, c)
        } else {
            let xs = tape.leaf_input(x)?;
            let u = self.net.forward(tape, &self.leaves, &xs)?;
            let grad = tape.tangent_entries(u)?;
            let c = conormal(tape, self.problem, &grad, &patch.normal, x)?;
            (u, c)
        };
        match patch.condition {
            Condition::Dirichlet => {
                let g = self.problem.dirichlet(patch, x);
                let beta = self.beta;
                let u2 = tape.mul(u, u);
                let half = tape.scale(u2, 0.5 * beta);
                let lin = tape.scale(u, g * beta);
                let pen = tape.sub(half, lin);
                terms.penalty.push(tape.scale(pen, weight));
                let gc = tape.constant(g);
                let diff = tape.sub(gc, u);
                let cons = tape.mul(diff, dnu);
                terms.consistency.push(tape.scale(cons, weight));
            }
            Condition::Neumann => {
                let g = self.problem.neumann(patch, x);
                terms.neumann.push(tape.scale(u, -weight * g));
            }
        }
        Ok(())
    }
}

fn check_batch<'a>(
    problem: &'a dyn Problem,
    batch: &SampleBatch,
    weights: &NitscheWeights,
) -> Result<Vec<&'a BoundaryPatch>, LossError> {
    let geometry = problem.geometry();
    if batch.dim != problem.dim() {
        return Err(LossError::GeometryMismatch(format!(
            "batch dimension {} vs problem dimension {}",
            batch.dim,
            problem.dim()
        )));
    }
    if batch.interior.is_empty() || batch.boundary.iter().any(|s| s.is_empty()) {
        return Err(LossError::EmptyBatch);
    }
    if batch.boundary.len() != geometry.patches.len()
        || weights.patch_measures.len() != geometry.patches.len()
    {
        return Err(LossError::GeometryMismatch(
            "patch count differs from geometry".into(),
        ));
    }
    batch
        .boundary
        .iter()
        .map(|s| {
            let patch = geometry
                .patch(s.patch_id)
                .map_err(|e| LossError::GeometryMismatch(e.to_string()))?;
            if patch.condition != s.condition || patch.normal != s.normal {
                return Err(LossError::GeometryMismatch(format!(
                    "patch {} labels differ",
                    s.patch_id
                )));
            }
            Ok(patch)
        })
        .collect()
}

fn patch_weight(weights: &NitscheWeights, index: usize, samples: &PatchSamples) -> f64 {
    weights.patch_measures[index] / samples.len() as f64
}

/// Records the whole loss on `tape` (full spatial tangents) and returns the
/// total together with its breakdown.
pub fn assemble_loss(
    problem: &dyn Problem,
    net: &ResNet,
    params: &[f64],
    batch: &SampleBatch,
    weights: &NitscheWeights,
    tape: &mut Tape,
) -> Result<(AugmentedScalar, LossBreakdown), LossError> {
    let patches = check_batch(problem, batch, weights)?;
    let leaves = net.register(tape, params)?;
    let rec = Recorder {
        problem,
        net,
        leaves,
        beta: weights.beta,
    };
    let mut terms = Terms::default();
    let wi = weights.volume / batch.interior_len() as f64;
    for k in 0..batch.interior_len() {
        rec.interior(tape, batch.interior_point(k), wi, &mut terms)?;
    }
    for (index, (samples, patch)) in batch.boundary.iter().zip(&patches).enumerate() {
        let w = patch_weight(weights, index, samples);
        for k in 0..samples.len() {
            rec.boundary(tape, patch, samples.point(k), w, false, &mut terms)?;
        }
    }
    Ok(terms.finish(tape))
}

/// Node budget per tape, in tangent entries; bounds memory for wide inputs.
const TAPE_BUDGET: usize = 1 << 22;

fn chunk_points(net: &ResNet, width: usize) -> usize {
    let c = net.config();
    let nodes_per_point = 3 * c.width * (2 * c.blocks + 1) + 16;
    (TAPE_BUDGET / (nodes_per_point * width.max(1))).max(1)
}

/// Loss breakdown and parameter gradient over a batch.
///
/// Points are recorded on a sequence of tapes of bounded size and the chunk
/// gradients are summed in a fixed order, so the result depends only on the
/// inputs.
pub fn loss_and_gradient(
    problem: &dyn Problem,
    net: &ResNet,
    params: &[f64],
    batch: &SampleBatch,
    weights: &NitscheWeights,
    mode: BoundaryTangent,
) -> Result<(LossBreakdown, GradientVector), LossError> {
    let patches = check_batch(problem, batch, weights)?;
    let d = problem.dim();
    let mut grad = GradientVector::zeros(params.len());
    let mut parts = [0.0f64; 4];

    let mut run = |width: usize,
                   record: &mut dyn FnMut(&mut Tape, &Recorder, &mut Terms) -> Result<(), LossError>|
     -> Result<(), LossError> {
        let mut tape = Tape::with_width(d, width, params.len());
        let leaves = net.register(&mut tape, params)?;
        let rec = Recorder {
            problem,
            net,
            leaves,
            beta: weights.beta,
        };
        let mut terms = Terms::default();
        record(&mut tape, &rec, &mut terms)?;
        let (total, b) = terms.finish(&mut tape);
        grad.accumulate(&tape.backward(total)?);
        parts[0] += b.interior;
        parts[1] += b.dirichlet_penalty;
        parts[2] += b.dirichlet_consistency;
        parts[3] += b.neumann;
        Ok(())
    };

    let n_int = batch.interior_len();
    let wi = weights.volume / n_int as f64;
    let step = chunk_points(net, d);
    for start in (0..n_int).step_by(step) {
        let end = (start + step).min(n_int);
        run(d, &mut |tape, rec, terms| {
            for k in start..end {
                rec.interior(tape, batch.interior_point(k), wi, terms)?;
            }
            Ok(())
        })?;
    }

    let directional =
        mode == BoundaryTangent::Directional && problem.operator() == Operator::Divergence;
    let width = if directional { 1 } else { d };
    // boundary points flattened in patch order
    let items: Vec<(usize, usize)> = batch
        .boundary
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.len()).map(move |k| (i, k)))
        .collect();
    let step = chunk_points(net, width);
    for chunk in items.chunks(step) {
        run(width, &mut |tape, rec, terms| {
            for &(i, k) in chunk {
                let samples = &batch.boundary[i];
                let w = patch_weight(weights, i, samples);
                rec.boundary(tape, patches[i], samples.point(k), w, directional, terms)?;
            }
            Ok(())
        })?;
    }

    Ok((
        LossBreakdown::from_parts(parts[0], parts[1], parts[2], parts[3]),
        grad,
    ))
}

/// Loss value only, through the same recording path (used by
/// finite-difference checks).
pub fn loss_value(
    problem: &dyn Problem,
    net: &ResNet,
    params: &[f64],
    batch: &SampleBatch,
    weights: &NitscheWeights,
) -> Result<LossBreakdown, LossError> {
    let mut tape = Tape::new(problem.dim(), params.len());
    Ok(assemble_loss(problem, net, params, batch, weights, &mut tape)?.1)
}

// ---------------------------------------------------------------------------
// Exact-quadrature energies (two-dimensional oracles)

/// A smooth function given by value and gradient.
pub type TestFunction<'a> = &'a dyn Fn(&[f64]) -> (f64, Vec<f64>);

fn require_2d(problem: &dyn Problem) -> Result<(), LossError> {
    if problem.dim() != 2 {
        return Err(LossError::UnsupportedDimension(problem.dim()));
    }
    Ok(())
}

/// Tensor Gauss rule over the bounding box of the geometry.
fn volume_rule(geometry: &DomainGeometry, order: usize) -> Vec<([f64; 2], f64)> {
    let (lo, hi) = geometry.bounds();
    let (t, w) = gauss_legendre_unit(order);
    let len = hi - lo;
    let mut rule = Vec::with_capacity(order * order);
    for (ti, wi) in t.iter().zip(&w) {
        for (tj, wj) in t.iter().zip(&w) {
            rule.push(([lo + len * ti, lo + len * tj], wi * wj * len * len));
        }
    }
    rule
}

fn patch_rule(patch: &BoundaryPatch, order: usize) -> Vec<([f64; 2], f64)> {
    let (t, w) = gauss_legendre_unit(order);
    t.iter()
        .zip(&w)
        .map(|(&ti, &wi)| {
            let mut x = [0.0; 2];
            patch.map(&[ti], &mut x);
            (x, wi * patch.measure)
        })
        .collect()
}

fn exact_conormal(problem: &dyn Problem, grad: &[f64], n: &[f64], x: &[f64]) -> f64 {
    match problem.operator() {
        Operator::Divergence => {
            let ag = problem.coefficient(x).apply(grad);
            n.iter().zip(&ag).map(|(a, b)| a * b).sum()
        }
        Operator::PLaplace(p) => {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            let dn: f64 = n.iter().zip(grad).map(|(a, b)| a * b).sum();
            if norm == 0.0 {
                0.0
            } else {
                norm.powf(p - 2.0) * dn
            }
        }
    }
}

fn energy_density(problem: &dyn Problem, grad: &[f64], x: &[f64]) -> f64 {
    match problem.operator() {
        Operator::Divergence => {
            let ag = problem.coefficient(x).apply(grad);
            0.5 * grad.iter().zip(&ag).map(|(a, b)| a * b).sum::<f64>()
        }
        Operator::PLaplace(p) => grad.iter().map(|g| g * g).sum::<f64>().powf(p / 2.0) / p,
    }
}

/// `I[v]` by tensor Gauss–Legendre
/// quadrature of the given order on the domain and every edge.
pub fn exact_energy_i(
    problem: &dyn Problem,
    v: TestFunction,
    beta: f64,
    order: usize,
) -> Result<f64, LossError> {
    energy_i(problem, v, beta, order, 1.0)
}

fn energy_i(
    problem: &dyn Problem,
    v: TestFunction,
    beta: f64,
    order: usize,
    sign: f64,
) -> Result<f64, LossError> {
    require_2d(problem)?;
    let geometry = problem.geometry();
    let mut volume = 0.0;
    for (x, w) in volume_rule(geometry, order) {
        let (val, grad) = v(&x);
        volume += w * (energy_density(problem, &grad, &x) - problem.source(&x) * val);
    }
    let mut boundary = 0.0;
    for patch in &geometry.patches {
        for (x, w) in patch_rule(patch, order) {
            let (val, grad) = v(&x);
            boundary += w * match patch.condition {
                Condition::Dirichlet => {
                    let g = problem.dirichlet(patch, &x);
                    let dn = sign * exact_conormal(problem, &grad, &patch.normal, &x);
                    0.5 * beta * (g - val).powi(2) + (g - val) * dn - 0.5 * beta * g * g
                }
                Condition::Neumann => -problem.neumann(patch, &x) * val,
            };
        }
    }
    Ok(volume + boundary)
}

/// `Ĩ[w] = ½∫A∇w·∇w − ∫_{Γ_D} w ∂_νw + (β/2)∫_{Γ_D} w²`.
pub fn exact_energy_tilde(
    problem: &dyn Problem,
    w: TestFunction,
    beta: f64,
    order: usize,
) -> Result<f64, LossError> {
    energy_tilde(problem, w, beta, order, 1.0)
}

fn energy_tilde(
    problem: &dyn Problem,
    w: TestFunction,
    beta: f64,
    order: usize,
    sign: f64,
) -> Result<f64, LossError> {
    require_2d(problem)?;
    if problem.operator() != Operator::Divergence {
        return Err(LossError::UnsupportedOperator);
    }
    let geometry = problem.geometry();
    let mut volume = 0.0;
    for (x, q) in volume_rule(geometry, order) {
        let (_, grad) = w(&x);
        volume += q * energy_density(problem, &grad, &x);
    }
    let mut boundary = 0.0;
    for patch in geometry
        .patches
        .iter()
        .filter(|p| p.condition == Condition::Dirichlet)
    {
        for (x, q) in patch_rule(patch, order) {
            let (val, grad) = w(&x);
            let dn = sign * exact_conormal(problem, &grad, &patch.normal, &x);
            boundary += q * (0.5 * beta * val * val - val * dn);
        }
    }
    Ok(volume + boundary)
}

/// `|Ĩ[u−v] − Ĩ[u] − I[v]|` for the problem's exact solution `u`.
pub fn identity_defect(
    problem: &dyn Problem,
    v: TestFunction,
    beta: f64,
    order: usize,
) -> Result<f64, LossError> {
    identity_defect_with_sign(problem, v, beta, order, 1.0)
}

/// [`identity_defect`] with every conormal derivative multiplied by `sign`;
/// `sign = -1` is the fault injection used by the self-check.
pub fn identity_defect_with_sign(
    problem: &dyn Problem,
    v: TestFunction,
    beta: f64,
    order: usize,
    sign: f64,
) -> Result<f64, LossError> {
    let u = |x: &[f64]| (problem.exact_u(x), problem.exact_grad(x));
    let diff = |x: &[f64]| {
        let (uv, ug) = u(x);
        let (vv, vg) = v(x);
        (uv - vv, ug.iter().zip(&vg).map(|(a, b)| a - b).collect())
    };
    let lhs = energy_tilde(problem, &diff, beta, order, sign)?;
    let tu = energy_tilde(problem, &u, beta, order, sign)?;
    let iv = energy_i(problem, v, beta, order, sign)?;
    Ok((lhs - tu - iv).abs())
}
