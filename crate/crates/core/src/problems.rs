//! Benchmark boundary-value problems with closed-form data and solutions.

use std::f64::consts::PI;
use std::fmt;

use thiserror::Error;

use crate::sampling::{BatchSampler, BoundaryPatch, Condition, DomainGeometry, HaltonStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("unknown problem {0:?}")]
    UnknownName(String),
    #[error("p must be greater than 1, got {0}")]
    InvalidP(f64),
    #[error("problem {0:?} needs an exponent p")]
    MissingP(String),
}

/// Differential operator of the energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Operator {
    /// `-∇·(A∇u)`, energy density `½ A∇v·∇v`.
    Divergence,
    /// `-∇·(|∇u|^{p-2}∇u)`, energy density `(1/p)|∇v|^p`.
    PLaplace(f64),
}

impl Operator {
    pub fn p(&self) -> f64 {
        match *self {
            Operator::Divergence => 2.0,
            Operator::PLaplace(p) => p,
        }
    }
}

/// `A(x)`: identity, or a dense row-major `d×d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Coefficient {
    Identity,
    Dense(Vec<f64>),
}

impl Coefficient {
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Coefficient::Identity => v.to_vec(),
            Coefficient::Dense(a) => {
                let d = v.len();
                (0..d)
                    .map(|i| (0..d).map(|j| a[i * d + j] * v[j]).sum())
                    .collect()
            }
        }
    }

    pub fn to_dense(&self, d: usize) -> Vec<f64> {
        match self {
            Coefficient::Identity => {
                let mut a = vec![0.0; d * d];
                for i in 0..d {
                    a[i * d + i] = 1.0;
                }
                a
            }
            Coefficient::Dense(a) => a.clone(),
        }
    }
}

/// A boundary-value problem: geometry, operator, data and exact solution.
pub trait Problem: Send + Sync {
    fn name(&self) -> &str;
    fn geometry(&self) -> &DomainGeometry;
    fn operator(&self) -> Operator;
    fn coefficient(&self, x: &[f64]) -> Coefficient;
    fn source(&self, x: &[f64]) -> f64;
    /// `g_D` on a Dirichlet patch.
    fn dirichlet(&self, patch: &BoundaryPatch, x: &[f64]) -> f64;
    /// `g_N` on a Neumann patch.
    fn neumann(&self, patch: &BoundaryPatch, x: &[f64]) -> f64;
    fn exact_u(&self, x: &[f64]) -> f64;
    fn exact_grad(&self, x: &[f64]) -> Vec<f64>;

    fn dim(&self) -> usize {
        self.geometry().dim()
    }

    /// Point where the exact solution is not smooth, if any.
    fn singular_point(&self) -> Option<Vec<f64>> {
        None
    }

    /// Whether a finite-difference stencil of half-width `h` at `x` stays
    /// clear of branch cuts.
    fn fd_safe(&self, _x: &[f64], _h: f64) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProblemKind {
    Mixed2d,
    Crack2d,
    PlapSmooth(f64),
    PlapSingular(f64),
    Dirichlet20d,
    Dirichlet100d,
}

impl ProblemKind {
    pub const NAMES: [&'static str; 6] = [
        "mixed2d",
        "crack2d",
        "plap_smooth",
        "plap_singular",
        "dirichlet20d",
        "dirichlet100d",
    ];

    pub fn needs_p(name: &str) -> bool {
        name.starts_with("plap_")
    }
}

/// One of the registered benchmark problems.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemDefinition {
    name: String,
    kind: ProblemKind,
    geometry: DomainGeometry,
}

impl fmt::Display for ProblemDefinition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ProblemKind::PlapSmooth(p) | ProblemKind::PlapSingular(p) => {
                write!(f, "{}(p={p})", self.name)
            }
            _ => f.write_str(&self.name),
        }
    }
}

/// Looks up a problem by its CLI name. `p` is required for the p-Laplace
/// problems and ignored otherwise.
pub fn registry_get(name: &str, p: Option<f64>) -> Result<ProblemDefinition, ProblemError> {
    let need_p = || -> Result<f64, ProblemError> {
        let p = p.ok_or_else(|| ProblemError::MissingP(name.to_string()))?;
        if !(p > 1.0) || !p.is_finite() {
            return Err(ProblemError::InvalidP(p));
        }
        Ok(p)
    };
    let (kind, geometry) = match name {
        "mixed2d" => {
            let mut g = DomainGeometry::unit_hypercube(2);
            // patches: 0 {x=0}, 1 {x=1}, 2 {y=0}, 3 {y=1}
            for patch in &mut g.patches {
                patch.condition = match patch.id {
                    1 | 3 => Condition::Dirichlet,
                    _ => Condition::Neumann,
                };
            }
            (ProblemKind::Mixed2d, g)
        }
        "crack2d" => (ProblemKind::Crack2d, DomainGeometry::cracked_square()),
        "plap_smooth" => (
            ProblemKind::PlapSmooth(need_p()?),
            DomainGeometry::unit_hypercube(2),
        ),
        "plap_singular" => (
            ProblemKind::PlapSingular(need_p()?),
            DomainGeometry::unit_hypercube(2),
        ),
        "dirichlet20d" => (ProblemKind::Dirichlet20d, DomainGeometry::unit_hypercube(20)),
        "dirichlet100d" => (
            ProblemKind::Dirichlet100d,
            DomainGeometry::unit_hypercube(100),
        ),
        other => return Err(ProblemError::UnknownName(other.to_string())),
    };
    Ok(ProblemDefinition {
        name: name.to_string(),
        kind,
        geometry,
    })
}

impl ProblemDefinition {
    pub fn kind(&self) -> ProblemKind {
        self.kind
    }
}

fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Polar angle in `(0, 2π)`, cut along the positive x-axis.
fn crack_angle(x: &[f64]) -> f64 {
    let t = x[1].atan2(x[0]);
    if t < 0.0 {
        t + 2.0 * PI
    } else {
        t
    }
}

fn mixed2d_a(x: &[f64]) -> [f64; 4] {
    let (x, y) = (x[0], x[1]);
    let a11 = (x + 1.0).powi(2) + y * y;
    let a12 = -x * y;
    let a22 = (x + 1.0).powi(2);
    [a11, a12, a12, a22]
}

/// `u`, first and second partial derivatives of the mixed2d solution
/// `x³y² + x sin(2πxy) sin(2πy)`.
struct Mixed2dDerivs {
    u: f64,
    ux: f64,
    uy: f64,
    uxx: f64,
    uxy: f64,
    uyy: f64,
}

fn mixed2d_derivs(p: &[f64]) -> Mixed2dDerivs {
    let (x, y) = (p[0], p[1]);
    let w = 2.0 * PI;
    let (s, c) = (w * x * y).sin_cos();
    let (t, k) = (w * y).sin_cos();
    let u = x.powi(3) * y * y + x * s * t;
    let ux = 3.0 * x * x * y * y + s * t + w * x * y * c * t;
    let uy = 2.0 * x.powi(3) * y + w * x * x * c * t + w * x * s * k;
    let uxx = 6.0 * x * y * y + 2.0 * w * y * c * t - w * w * x * y * y * s * t;
    let uyy = 2.0 * x.powi(3) - w * w * x.powi(3) * s * t + 2.0 * w * w * x * x * c * k
        - w * w * x * s * t;
    let uxy = 6.0 * x * x * y + 2.0 * w * x * c * t + w * s * k - w * w * x * x * y * s * t
        + w * w * x * y * c * k;
    Mixed2dDerivs {
        u,
        ux,
        uy,
        uxx,
        uxy,
        uyy,
    }
}

impl Problem for ProblemDefinition {
    fn name(&self) -> &str {
        &self.name
    }

    fn geometry(&self) -> &DomainGeometry {
        &self.geometry
    }

    fn operator(&self) -> Operator {
        match self.kind {
            ProblemKind::PlapSmooth(p) | ProblemKind::PlapSingular(p) => Operator::PLaplace(p),
            _ => Operator::Divergence,
        }
    }

    fn coefficient(&self, x: &[f64]) -> Coefficient {
        match self.kind {
            ProblemKind::Mixed2d => Coefficient::Dense(mixed2d_a(x).to_vec()),
            _ => Coefficient::Identity,
        }
    }

    fn source(&self, x: &[f64]) -> f64 {
        match self.kind {
            ProblemKind::Mixed2d => {
                // -∇·(A∇u) expanded with ∂x a11 = 2(x+1), ∂x a12 = -y, ∂y a12 = -x
                let a = mixed2d_a(x);
                let dv = mixed2d_derivs(x);
                let (px, py) = (x[0], x[1]);
                let div = 2.0 * (px + 1.0) * dv.ux + a[0] * dv.uxx - py * dv.uy
                    + 2.0 * a[1] * dv.uxy
                    - px * dv.ux
                    + a[3] * dv.uyy;
                -div
            }
            ProblemKind::Crack2d | ProblemKind::PlapSingular(_) => 0.0,
            ProblemKind::PlapSmooth(_) => 1.0,
            ProblemKind::Dirichlet20d => {
                let r = norm_sq(x).sqrt();
                -5.0 * (x.len() as f64 + 3.0) * r.powi(3)
            }
            ProblemKind::Dirichlet100d => -self.exact_u(x) / 100.0,
        }
    }

    fn dirichlet(&self, _patch: &BoundaryPatch, x: &[f64]) -> f64 {
        // on the slit both sides evaluate to zero: θ = 0 above, sin(π) = 0 below
        self.exact_u(x)
    }

    fn neumann(&self, patch: &BoundaryPatch, x: &[f64]) -> f64 {
        let flux = self.coefficient(x).apply(&self.exact_grad(x));
        patch.normal.iter().zip(&flux).map(|(n, f)| n * f).sum()
    }

    fn exact_u(&self, x: &[f64]) -> f64 {
        match self.kind {
            ProblemKind::Mixed2d => mixed2d_derivs(x).u,
            ProblemKind::Crack2d => {
                let r = norm_sq(x).sqrt();
                r.sqrt() * (crack_angle(x) / 2.0).sin()
            }
            ProblemKind::PlapSmooth(p) => {
                let r = norm_sq(x).sqrt();
                2f64.powf(-1.0 / (p - 1.0)) * (1.0 - 1.0 / p) * (1.0 - r.powf(p / (p - 1.0)))
            }
            ProblemKind::PlapSingular(p) => norm_sq(x).sqrt().powf((p - 2.0) / (p - 1.0)),
            ProblemKind::Dirichlet20d => norm_sq(x).powf(2.5),
            ProblemKind::Dirichlet100d => (x.iter().sum::<f64>() / 100.0).exp(),
        }
    }

    fn exact_grad(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            ProblemKind::Mixed2d => {
                let dv = mixed2d_derivs(x);
                vec![dv.ux, dv.uy]
            }
            ProblemKind::Crack2d => {
                let r = norm_sq(x).sqrt();
                let half = crack_angle(x) / 2.0;
                let scale = 0.5 / r.sqrt();
                vec![-scale * half.sin(), scale * half.cos()]
            }
            ProblemKind::PlapSmooth(p) => {
                // ∇u = -(r/2)^{1/(p-1)} x / r
                let r = norm_sq(x).sqrt();
                let mag = (r / 2.0).powf(1.0 / (p - 1.0));
                x.iter().map(|&xi| -mag * xi / r).collect()
            }
            ProblemKind::PlapSingular(p) => {
                let s = (p - 2.0) / (p - 1.0);
                let r2 = norm_sq(x);
                let scale = s * r2.sqrt().powf(s - 2.0);
                x.iter().map(|&xi| scale * xi).collect()
            }
            ProblemKind::Dirichlet20d => {
                let r3 = norm_sq(x).powf(1.5);
                x.iter().map(|&xi| 5.0 * r3 * xi).collect()
            }
            ProblemKind::Dirichlet100d => {
                let g = self.exact_u(x) / 100.0;
                vec![g; x.len()]
            }
        }
    }

    fn singular_point(&self) -> Option<Vec<f64>> {
        match self.kind {
            ProblemKind::Crack2d | ProblemKind::PlapSmooth(_) | ProblemKind::PlapSingular(_) => {
                Some(vec![0.0, 0.0])
            }
            _ => None,
        }
    }

    fn fd_safe(&self, x: &[f64], h: f64) -> bool {
        match self.kind {
            ProblemKind::Crack2d => !(x[1].abs() <= 2.0 * h && x[0] >= -2.0 * h),
            _ => true,
        }
    }
}

/// Outcome of [`verify_problem`]: worst residual per invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub problem: String,
    pub n_points: usize,
    /// `max |g_D − u|` over Dirichlet samples.
    pub dirichlet_residual: f64,
    /// `max |g_N − n·A∇u|` over Neumann samples, scaled by `max(1, |g_N|)`.
    pub neumann_residual: f64,
    /// `max |∇u − FD(u)|`, scaled by `max(1, |∇u|)`.
    pub gradient_residual: f64,
    /// `max |f + div_FD(flux)|`, scaled by `max(1, |f|)`.
    pub source_residual: f64,
    /// Smallest Cholesky pivot of `A` (positive means positive definite).
    pub min_pivot: f64,
    pub max_asymmetry: f64,
    pub tolerance: f64,
}

impl VerifyReport {
    pub fn max_residual(&self) -> f64 {
        self.dirichlet_residual
            .max(self.neumann_residual)
            .max(self.gradient_residual)
            .max(self.source_residual)
            .max(self.max_asymmetry)
    }

    pub fn passed(&self) -> bool {
        self.max_residual() <= self.tolerance && self.min_pivot > 0.0
    }
}

pub const VERIFY_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const SINGULAR_EXCLUSION: f64 = 0.05;

/// Flux `A∇u` or `|∇u|^{p-2}∇u` of the exact solution.
fn exact_flux(problem: &dyn Problem, x: &[f64]) -> Vec<f64> {
    let g = problem.exact_grad(x);
    match problem.operator() {
        Operator::Divergence => problem.coefficient(x).apply(&g),
        Operator::PLaplace(p) => {
            let s = norm_sq(&g).sqrt().powf(p - 2.0);
            g.iter().map(|gi| s * gi).collect()
        }
    }
}

/// Checks the problem's data against finite-difference oracles on
/// `n_points` Halton points (and as many per boundary patch).
pub fn verify_problem(problem: &dyn Problem, n_points: usize) -> VerifyReport {
    let geometry = problem.geometry();
    let d = problem.dim();
    let h = FD_STEP;
    let mut report = VerifyReport {
        problem: problem.name().to_string(),
        n_points,
        dirichlet_residual: 0.0,
        neumann_residual: 0.0,
        gradient_residual: 0.0,
        source_residual: 0.0,
        min_pivot: f64::INFINITY,
        max_asymmetry: 0.0,
        tolerance: VERIFY_TOLERANCE,
    };

    let mut stream = HaltonStream::new(d);
    let points = geometry
        .draw_interior(&mut stream, n_points)
        .expect("stream dimension matches");
    let singular = problem.singular_point();
    let mut xp = vec![0.0; d];
    for x in points.chunks(d) {
        let a = problem.coefficient(x).to_dense(d);
        report.min_pivot = report.min_pivot.min(cholesky_min_pivot(&a, d));
        for i in 0..d {
            for j in 0..i {
                report.max_asymmetry = report.max_asymmetry.max((a[i * d + j] - a[j * d + i]).abs());
            }
        }

        if let Some(s) = &singular {
            let dist = x.iter().zip(s).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if dist < SINGULAR_EXCLUSION {
                continue;
            }
        }
        if !problem.fd_safe(x, h) {
            continue;
        }

        let grad = problem.exact_grad(x);
        let mut div = 0.0;
        for i in 0..d {
            xp.copy_from_slice(x);
            xp[i] = x[i] + h;
            let up = problem.exact_u(&xp);
            let fp = exact_flux(problem, &xp)[i];
            xp[i] = x[i] - h;
            let um = problem.exact_u(&xp);
            let fm = exact_flux(problem, &xp)[i];
            let fd = (up - um) / (2.0 * h);
            let r = (fd - grad[i]).abs() / grad[i].abs().max(1.0);
            report.gradient_residual = report.gradient_residual.max(r);
            div += (fp - fm) / (2.0 * h);
        }
        let f = problem.source(x);
        report.source_residual = report.source_residual.max((f + div).abs() / f.abs().max(1.0));
    }

    let mut sampler = BatchSampler::new(geometry);
    let batch = sampler.next_batch(0, n_points);
    for samples in &batch.boundary {
        let patch = geometry.patch(samples.patch_id).expect("patch from geometry");
        for k in 0..samples.len() {
            let x = samples.point(k);
            match patch.condition {
                Condition::Dirichlet => {
                    let r = (problem.dirichlet(patch, x) - problem.exact_u(x)).abs();
                    report.dirichlet_residual = report.dirichlet_residual.max(r);
                }
                Condition::Neumann => {
                    let flux = problem.coefficient(x).apply(&problem.exact_grad(x));
                    let expect: f64 = patch.normal.iter().zip(&flux).map(|(n, f)| n * f).sum();
                    let g = problem.neumann(patch, x);
                    let r = (g - expect).abs() / g.abs().max(1.0);
                    report.neumann_residual = report.neumann_residual.max(r);
                }
            }
        }
    }
    report
}

/// Smallest pivot of a Cholesky factorisation of the `d×d` matrix `a`,
/// or a non-positive value if it is not positive definite.
fn cholesky_min_pivot(a: &[f64], d: usize) -> f64 {
    let mut l = vec![0.0; d * d];
    let mut min_pivot = f64::INFINITY;
    for j in 0..d {
        let mut diag = a[j * d + j];
        for k in 0..j {
            diag -= l[j * d + k] * l[j * d + k];
        }
        if diag <= 0.0 {
            return diag;
        }
        let ljj = diag.sqrt();
        min_pivot = min_pivot.min(diag);
        l[j * d + j] = ljj;
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = s / ljj;
        }
    }
    min_pivot
}
