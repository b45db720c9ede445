//! Halton streams and sample batches on the supported geometries.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("stream has dimension {stream}, geometry needs {needed}")]
    StreamDimension { stream: usize, needed: usize },
    #[error("no boundary patch with id {0}")]
    UnknownPatch(usize),
}

/// The first `k` primes, in increasing order.
pub fn first_primes(k: usize) -> Vec<u64> {
    let mut primes: Vec<u64> = Vec::with_capacity(k);
    let mut candidate = 2u64;
    while primes.len() < k {
        if primes
            .iter()
            .take_while(|&&p| p * p <= candidate)
            .all(|&p| !candidate.is_multiple_of(p))
        {
            primes.push(candidate);
        }
        candidate += 1;
    }
    primes
}

/// Digit-reversed base-`base` expansion of `index`. The value is formed as an
/// exact rational and divided once, so it is correctly rounded whenever both
/// numerator and denominator are below 2^53.
pub fn radical_inverse(index: u64, base: u64) -> f64 {
    debug_assert!(base >= 2);
    let b = base as u128;
    let mut i = index as u128;
    let mut numerator: u128 = 0;
    let mut denominator: u128 = 1;
    while i > 0 {
        numerator = numerator * b + i % b;
        denominator *= b;
        i /= b;
    }
    numerator as f64 / denominator as f64
}

/// Multi-dimensional Halton sequence with bases 2, 3, 5, … per coordinate,
/// starting at index 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HaltonStream {
    bases: Vec<u64>,
    next_index: u64,
}

impl HaltonStream {
    pub fn new(dim: usize) -> Self {
        Self {
            bases: first_primes(dim),
            next_index: 1,
        }
    }

    pub fn dim(&self) -> usize {
        self.bases.len()
    }

    pub fn bases(&self) -> &[u64] {
        &self.bases
    }

    pub fn next_index(&self) -> u64 {
        self.next_index
    }

    /// Writes the next point into `out` and advances.
    pub fn next_into(&mut self, out: &mut [f64]) {
        for (o, &b) in out.iter_mut().zip(&self.bases) {
            *o = radical_inverse(self.next_index, b);
        }
        self.next_index += 1;
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        let mut p = vec![0.0; self.dim()];
        self.next_into(&mut p);
        p
    }

    /// The next `n` points, flattened.
    pub fn take_flat(&mut self, n: usize) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; n * d];
        for chunk in out.chunks_mut(d.max(1)).take(n) {
            self.next_into(chunk);
        }
        if d == 0 {
            self.next_index += n as u64;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Dirichlet,
    Neumann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Low,
    High,
}

/// Shape of a boundary patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PatchShape {
    /// Face of the box `[lo, hi]^d` with coordinate `axis` fixed.
    Face {
        axis: usize,
        side: Side,
        lo: f64,
        hi: f64,
    },
    /// Upper side of the slit `[0,1)×{0}`, seen from `y > 0`.
    SlitUpper,
    /// Lower side of the slit, seen from `y < 0`.
    SlitLower,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPatch {
    pub id: usize,
    pub shape: PatchShape,
    pub normal: Vec<f64>,
    pub measure: f64,
    pub condition: Condition,
}

impl BoundaryPatch {
    /// Dimension of the patch, the parameter space of [`Self::map`].
    pub fn param_dim(&self) -> usize {
        self.normal.len() - 1
    }

    /// Maps `t ∈ [0,1]^{d-1}` onto the patch.
    pub fn map(&self, t: &[f64], out: &mut [f64]) {
        match self.shape {
            PatchShape::Face { axis, side, lo, hi } => {
                let mut ti = t.iter();
                for (k, o) in out.iter_mut().enumerate() {
                    *o = if k == axis {
                        match side {
                            Side::Low => lo,
                            Side::High => hi,
                        }
                    } else {
                        lo + (hi - lo) * ti.next().expect("too few patch parameters")
                    };
                }
            }
            PatchShape::SlitUpper | PatchShape::SlitLower => {
                out[0] = t[0];
                out[1] = 0.0;
            }
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self.shape {
            PatchShape::Face { axis, side, lo, hi } => x.iter().enumerate().all(|(k, &v)| {
                if k == axis {
                    v == match side {
                        Side::Low => lo,
                        Side::High => hi,
                    }
                } else {
                    (lo..=hi).contains(&v)
                }
            }),
            PatchShape::SlitUpper | PatchShape::SlitLower => {
                x[1] == 0.0 && (0.0..=1.0).contains(&x[0])
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeometryKind {
    /// `(0,1)^d`.
    UnitHypercube(usize),
    /// `(-1,1)²`.
    SquareSym,
    /// `(-1,1)² \ [0,1)×{0}`.
    CrackedSquare,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainGeometry {
    pub kind: GeometryKind,
    pub volume: f64,
    pub patches: Vec<BoundaryPatch>,
}

impl DomainGeometry {
    pub fn unit_hypercube(d: usize) -> Self {
        Self {
            kind: GeometryKind::UnitHypercube(d),
            volume: 1.0,
            patches: box_faces(d, 0.0, 1.0),
        }
    }

    pub fn square_sym() -> Self {
        Self {
            kind: GeometryKind::SquareSym,
            volume: 4.0,
            patches: box_faces(2, -1.0, 1.0),
        }
    }

    pub fn cracked_square() -> Self {
        let mut patches = box_faces(2, -1.0, 1.0);
        patches.push(BoundaryPatch {
            id: 4,
            shape: PatchShape::SlitUpper,
            normal: vec![0.0, -1.0],
            measure: 1.0,
            condition: Condition::Dirichlet,
        });
        patches.push(BoundaryPatch {
            id: 5,
            shape: PatchShape::SlitLower,
            normal: vec![0.0, 1.0],
            measure: 1.0,
            condition: Condition::Dirichlet,
        });
        Self {
            kind: GeometryKind::CrackedSquare,
            volume: 4.0,
            patches,
        }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            GeometryKind::UnitHypercube(d) => d,
            GeometryKind::SquareSym | GeometryKind::CrackedSquare => 2,
        }
    }

    /// Bounding box `[lo, hi]^d`.
    pub fn bounds(&self) -> (f64, f64) {
        match self.kind {
            GeometryKind::UnitHypercube(_) => (0.0, 1.0),
            GeometryKind::SquareSym | GeometryKind::CrackedSquare => (-1.0, 1.0),
        }
    }

    pub fn patch(&self, id: usize) -> Result<&BoundaryPatch, SamplingError> {
        self.patches
            .iter()
            .find(|p| p.id == id)
            .ok_or(SamplingError::UnknownPatch(id))
    }

    pub fn boundary_measure(&self, condition: Condition) -> f64 {
        self.patches
            .iter()
            .filter(|p| p.condition == condition)
            .map(|p| p.measure)
            .sum()
    }

    /// Strict interior test.
    pub fn contains_interior(&self, x: &[f64]) -> bool {
        let (lo, hi) = self.bounds();
        let in_box = x.len() == self.dim() && x.iter().all(|&v| v > lo && v < hi);
        match self.kind {
            GeometryKind::CrackedSquare => in_box && !on_slit(x),
            _ => in_box,
        }
    }

    /// Next `n` interior points from `stream`, flattened.
    pub fn draw_interior(
        &self,
        stream: &mut HaltonStream,
        n: usize,
    ) -> Result<Vec<f64>, SamplingError> {
        let d = self.dim();
        if stream.dim() != d {
            return Err(SamplingError::StreamDimension {
                stream: stream.dim(),
                needed: d,
            });
        }
        let (lo, hi) = self.bounds();
        let mut out = Vec::with_capacity(n * d);
        let mut t = vec![0.0; d];
        while out.len() < n * d {
            stream.next_into(&mut t);
            let start = out.len();
            out.extend(t.iter().map(|&ti| lo + (hi - lo) * ti));
            if self.kind == GeometryKind::CrackedSquare && on_slit(&out[start..]) {
                out.truncate(start);
            }
        }
        Ok(out)
    }

    /// Next `n` points on `patch` from its own `(d-1)`-dimensional stream.
    pub fn draw_boundary(
        &self,
        patch: &BoundaryPatch,
        stream: &mut HaltonStream,
        n: usize,
    ) -> Result<Vec<f64>, SamplingError> {
        let d = self.dim();
        if stream.dim() != patch.param_dim() {
            return Err(SamplingError::StreamDimension {
                stream: stream.dim(),
                needed: patch.param_dim(),
            });
        }
        let mut out = vec![0.0; n * d];
        let mut t = vec![0.0; patch.param_dim()];
        for chunk in out.chunks_mut(d) {
            stream.next_into(&mut t);
            patch.map(&t, chunk);
        }
        Ok(out)
    }
}

fn on_slit(x: &[f64]) -> bool {
    x[1] == 0.0 && x[0] >= 0.0
}

fn box_faces(d: usize, lo: f64, hi: f64) -> Vec<BoundaryPatch> {
    let measure = (hi - lo).powi(d as i32 - 1);
    let mut patches = Vec::with_capacity(2 * d);
    for axis in 0..d {
        for side in [Side::Low, Side::High] {
            let mut normal = vec![0.0; d];
            normal[axis] = match side {
                Side::Low => -1.0,
                Side::High => 1.0,
            };
            patches.push(BoundaryPatch {
                id: patches.len(),
                shape: PatchShape::Face { axis, side, lo, hi },
                normal,
                measure,
                condition: Condition::Dirichlet,
            });
        }
    }
    patches
}

/// Points on one patch, carrying the patch's normal and measure.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSamples {
    pub patch_id: usize,
    pub condition: Condition,
    pub normal: Vec<f64>,
    pub measure: f64,
    pub points: Vec<f64>,
}

impl PatchSamples {
    pub fn len(&self) -> usize {
        if self.normal.is_empty() {
            0
        } else {
            self.points.len() / self.normal.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, k: usize) -> &[f64] {
        let d = self.normal.len();
        &self.points[k * d..(k + 1) * d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub dim: usize,
    pub volume: f64,
    pub interior: Vec<f64>,
    pub boundary: Vec<PatchSamples>,
}

impl SampleBatch {
    pub fn interior_len(&self) -> usize {
        self.interior.len() / self.dim
    }

    pub fn interior_point(&self, k: usize) -> &[f64] {
        &self.interior[k * self.dim..(k + 1) * self.dim]
    }
}

/// Independent streams for the interior and for every boundary patch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    geometry: DomainGeometry,
    interior: HaltonStream,
    patches: Vec<HaltonStream>,
}

impl BatchSampler {
    pub fn new(geometry: &DomainGeometry) -> Self {
        Self {
            interior: HaltonStream::new(geometry.dim()),
            patches: geometry
                .patches
                .iter()
                .map(|p| HaltonStream::new(p.param_dim()))
                .collect(),
            geometry: geometry.clone(),
        }
    }

    /// `n_interior` interior points plus `n_boundary` points on every patch,
    /// in patch order.
    pub fn next_batch(&mut self, n_interior: usize, n_boundary: usize) -> SampleBatch {
        let interior = self
            .geometry
            .draw_interior(&mut self.interior, n_interior)
            .expect("interior stream matches geometry");
        let boundary = self
            .geometry
            .patches
            .iter()
            .zip(&mut self.patches)
            .map(|(patch, stream)| PatchSamples {
                patch_id: patch.id,
                condition: patch.condition,
                normal: patch.normal.clone(),
                measure: patch.measure,
                points: self
                    .geometry
                    .draw_boundary(patch, stream, n_boundary)
                    .expect("patch stream matches patch"),
            })
            .collect();
        SampleBatch {
            dim: self.geometry.dim(),
            volume: self.geometry.volume,
            interior,
            boundary,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radical_inverse_hand_values() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(2, 2), 0.25);
        assert_eq!(radical_inverse(3, 2), 0.75);
        assert_eq!(radical_inverse(4, 2), 0.125);
        assert_eq!(radical_inverse(1, 3), 1.0 / 3.0);
        assert_eq!(radical_inverse(2, 3), 2.0 / 3.0);
        assert_eq!(radical_inverse(4, 3), 4.0 / 9.0);
    }

    #[test]
    fn radical_inverse_stays_inside_unit_interval() {
        for base in [2, 3, 5, 7] {
            for i in 1..=1_000_000u64 {
                let v = radical_inverse(i, base);
                assert!(v > 0.0 && v < 1.0, "base {base} index {i} -> {v}");
            }
        }
    }

    #[test]
    fn primes() {
        assert_eq!(first_primes(6), vec![2, 3, 5, 7, 11, 13]);
        assert_eq!(*first_primes(100).last().unwrap(), 541);
    }

    #[test]
    fn first_interior_points() {
        let mut s = HaltonStream::new(2);
        let p = DomainGeometry::unit_hypercube(2).draw_interior(&mut s, 1).unwrap();
        assert_eq!(p, vec![0.5, 1.0 / 3.0]);

        let mut s = HaltonStream::new(2);
        let p = DomainGeometry::square_sym().draw_interior(&mut s, 1).unwrap();
        assert_eq!(p[0], 0.0);
        assert!((p[1] + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn successive_draws_never_repeat() {
        let g = DomainGeometry::unit_hypercube(3);
        let mut s = HaltonStream::new(3);
        let a = g.draw_interior(&mut s, 64).unwrap();
        let b = g.draw_interior(&mut s, 64).unwrap();
        for p in a.chunks(3) {
            assert!(b.chunks(3).all(|q| q != p));
        }
        assert_eq!(s.next_index(), 129);
    }

    #[test]
    fn stream_dimension_is_checked() {
        let mut s = HaltonStream::new(3);
        assert_eq!(
            DomainGeometry::unit_hypercube(2).draw_interior(&mut s, 1),
            Err(SamplingError::StreamDimension { stream: 3, needed: 2 })
        );
    }

    #[test]
    fn boundary_first_points() {
        let g = DomainGeometry::unit_hypercube(2);
        // patch 1 is {1}×(0,1)
        let patch = g.patch(1).unwrap();
        let mut s = HaltonStream::new(1);
        assert_eq!(g.draw_boundary(patch, &mut s, 1).unwrap(), vec![1.0, 0.5]);
        assert_eq!(patch.normal, vec![1.0, 0.0]);

        let c = DomainGeometry::cracked_square();
        let top = c.patch(4).unwrap();
        let mut s = HaltonStream::new(1);
        assert_eq!(c.draw_boundary(top, &mut s, 1).unwrap(), vec![0.5, 0.0]);
        assert_eq!(top.normal, vec![0.0, -1.0]);
    }

    #[test]
    fn geometry_measures() {
        let g = DomainGeometry::unit_hypercube(20);
        assert_eq!(g.patches.len(), 40);
        for p in &g.patches {
            assert_eq!(p.measure, 1.0);
            assert_eq!(p.normal.iter().map(|v| v * v).sum::<f64>(), 1.0);
            assert_eq!(p.normal.iter().filter(|v| **v != 0.0).count(), 1);
        }
        let s = DomainGeometry::square_sym();
        assert_eq!(s.volume, 4.0);
        assert!(s.patches.iter().all(|p| p.measure == 2.0));
        let c = DomainGeometry::cracked_square();
        let measures: Vec<f64> = c.patches.iter().map(|p| p.measure).collect();
        assert_eq!(measures, vec![2.0, 2.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn interior_containment() {
        for g in [
            DomainGeometry::unit_hypercube(2),
            DomainGeometry::square_sym(),
            DomainGeometry::cracked_square(),
        ] {
            let mut s = HaltonStream::new(2);
            let pts = g.draw_interior(&mut s, 1_000_000).unwrap();
            assert!(pts.chunks(2).all(|p| g.contains_interior(p)));
        }
    }

    #[test]
    fn boundary_points_lie_on_their_patch() {
        let g = DomainGeometry::cracked_square();
        let mut sampler = BatchSampler::new(&g);
        let batch = sampler.next_batch(16, 16);
        for samples in &batch.boundary {
            let patch = g.patch(samples.patch_id).unwrap();
            for k in 0..samples.len() {
                assert!(patch.contains(samples.point(k)));
            }
        }
    }

    #[test]
    fn halton_average_converges() {
        let mut s = HaltonStream::new(1);
        let pts = s.take_flat(4096);
        let mean = pts.iter().sum::<f64>() / 4096.0;
        assert!((mean - 0.5).abs() < 1e-3);
    }

    #[test]
    fn sampler_is_deterministic() {
        let g = DomainGeometry::unit_hypercube(3);
        let mut a = BatchSampler::new(&g);
        let mut b = BatchSampler::new(&g);
        for _ in 0..3 {
            assert_eq!(a.next_batch(8, 4), b.next_batch(8, 4));
        }
    }
}
