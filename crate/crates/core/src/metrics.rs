//! Relative L² and H¹ errors against the exact solution, by quasi-Monte Carlo
//! over interior Halton points.

use thiserror::Error;

use crate::network::{ResNet, Scratch};
use crate::problems::Problem;
use crate::sampling::HaltonStream;

/// Default size of the evaluation cloud.
pub const DEFAULT_EVAL_POINTS: usize = 100_000;

/// Points closer than this to a singular point are left out.
pub const SINGULAR_EXCLUSION: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("exact solution has numerically zero norm on the evaluation cloud")]
    ZeroNorm,
    #[error("evaluation cloud is empty")]
    NoPoints,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorReport {
    pub e_l2: f64,
    /// Full H¹ norm: L² part plus gradient seminorm.
    pub e_h1: f64,
    pub e_h1_semi: f64,
    pub n_points: usize,
}

/// Interior Halton cloud with the exact solution tabulated once.
#[derive(Debug, Clone)]
pub struct ErrorEvaluator {
    dim: usize,
    points: Vec<f64>,
    u: Vec<f64>,
    grad: Vec<f64>,
    u_sq: f64,
    grad_sq: f64,
}

impl ErrorEvaluator {
    pub fn new(problem: &dyn Problem, n_points: usize) -> Result<Self, MetricsError> {
        if n_points == 0 {
            return Err(MetricsError::NoPoints);
        }
        let geometry = problem.geometry();
        let dim = problem.dim();
        let singular = problem.singular_point();
        let mut stream = HaltonStream::new(dim);
        let raw = geometry
            .draw_interior(&mut stream, n_points)
            .expect("stream dimension matches geometry");
        let mut points = Vec::with_capacity(raw.len());
        for x in raw.chunks(dim) {
            let near = singular.as_ref().is_some_and(|s| {
                x.iter().zip(s).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
                    < SINGULAR_EXCLUSION
            });
            if !near {
                points.extend_from_slice(x);
            }
        }
        let n = points.len() / dim;
        let mut u = Vec::with_capacity(n);
        let mut grad = Vec::with_capacity(n * dim);
        let (mut u_sq, mut grad_sq) = (0.0, 0.0);
        for x in points.chunks(dim) {
            let v = problem.exact_u(x);
            let g = problem.exact_grad(x);
            u_sq += v * v;
            grad_sq += g.iter().map(|t| t * t).sum::<f64>();
            u.push(v);
            grad.extend_from_slice(&g);
        }
        if !(u_sq > f64::MIN_POSITIVE) {
            return Err(MetricsError::ZeroNorm);
        }
        Ok(Self {
            dim,
            points,
            u,
            grad,
            u_sq,
            grad_sq,
        })
    }

    pub fn n_points(&self) -> usize {
        self.u.len()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Errors of an arbitrary approximation given by value and gradient.
    pub fn evaluate_fn(&self, mut approx: impl FnMut(&[f64]) -> (f64, Vec<f64>)) -> ErrorReport {
        self.accumulate(|x, out| {
            let (v, g) = approx(x);
            out.copy_from_slice(&g);
            v
        })
    }

    /// Errors of the network `û(·; params)`.
    pub fn evaluate(&self, net: &ResNet, params: &[f64]) -> ErrorReport {
        let mut scratch = Scratch::default();
        self.accumulate(|x, out| {
            net.eval_with_grad_into(params, x, &mut scratch, true);
            out.copy_from_slice(&scratch.grad);
            scratch.value
        })
    }

    fn accumulate(&self, mut approx: impl FnMut(&[f64], &mut [f64]) -> f64) -> ErrorReport {
        let d = self.dim;
        let mut g = vec![0.0; d];
        let (mut e0, mut e1) = (0.0, 0.0);
        for (k, x) in self.points.chunks(d).enumerate() {
            let v = approx(x, &mut g);
            e0 += (self.u[k] - v).powi(2);
            e1 += self.grad[k * d..(k + 1) * d]
                .iter()
                .zip(&g)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>();
        }
        ErrorReport {
            e_l2: (e0 / self.u_sq).sqrt(),
            e_h1: ((e0 + e1) / (self.u_sq + self.grad_sq)).sqrt(),
            e_h1_semi: if self.grad_sq > 0.0 {
                (e1 / self.grad_sq).sqrt()
            } else {
                f64::NAN
            },
            n_points: self.n_points(),
        }
    }
}

/// One-shot form of [`ErrorEvaluator`].
pub fn evaluate_errors(
    problem: &dyn Problem,
    net: &ResNet,
    params: &[f64],
    n_points: usize,
) -> Result<ErrorReport, MetricsError> {
    Ok(ErrorEvaluator::new(problem, n_points)?.evaluate(net, params))
}
