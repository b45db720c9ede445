//! Reverse-over-forward automatic differentiation.
//!
//! Every recorded scalar carries its value together with a fixed-width
//! tangent: the derivative of the value along `width` seed directions in the
//! spatial input (by default the `d` coordinate axes, so the tangent is the
//! spatial gradient). [`Tape::backward`] sweeps the record in reverse and
//! propagates adjoints through both channels, so a loss that depends on
//! `∇ₓû` is differentiated correctly with respect to the network parameters.
//!
//! Tangents that are structurally zero (parameters, constants, and anything
//! computed only from them) are not stored.

use std::ops::{Deref, DerefMut, Index};
use std::sync::atomic::{AtomicU32, Ordering};

use thiserror::Error;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

const NO_TANGENT: u32 = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter index {index} out of range for {len} parameters")]
    ParamOutOfRange { index: usize, len: usize },
    #[error("parameter {0} already has a leaf on this tape")]
    DuplicateParam(usize),
    #[error("invalid operand for {op}: {value}")]
    InvalidOperand { op: &'static str, value: f64 },
    #[error("scalar does not belong to this tape")]
    ForeignNode,
}

/// Handle to a scalar recorded on a [`Tape`].
///
/// Value and tangent live in the tape and are read through
/// [`Tape::value`] and [`Tape::tangent`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AugmentedScalar {
    tape: u32,
    index: u32,
}

impl AugmentedScalar {
    pub fn node_id(self) -> usize {
        self.index as usize
    }
}

/// Gradient of a recorded scalar with respect to the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// `self += other`, entry by entry in index order.
    pub fn accumulate(&mut self, other: &GradientVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }
}

impl Deref for GradientVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for GradientVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl Index<usize> for GradientVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Elementary operations accepted by [`Tape::arith`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithKind {
    Add,
    Sub,
    Mul,
    Div,
    PowConst,
    Tanh,
    Exp,
    Sqrt,
    Abs,
}

/// Second operand of [`Tape::arith`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Operand {
    Scalar(AugmentedScalar),
    Real(f64),
    /// For unary kinds.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Neg,
    Scale(f64),
    Tanh,
    Exp,
    Sqrt,
    Abs,
    Pow(f64),
}

impl Unary {
    /// First and second derivative at input `x` with output `y`.
    fn derivatives(self, x: f64, y: f64) -> (f64, f64) {
        match self {
            Unary::Neg => (-1.0, 0.0),
            Unary::Scale(k) => (k, 0.0),
            Unary::Tanh => {
                let s = 1.0 - y * y;
                (s, -2.0 * y * s)
            }
            Unary::Exp => (y, y),
            Unary::Sqrt => (0.5 / y, -0.25 / (y * y * y)),
            Unary::Abs => (if x < 0.0 { -1.0 } else { 1.0 }, 0.0),
            Unary::Pow(c) => {
                if c == 2.0 {
                    (2.0 * x, 2.0)
                } else if c == 1.0 {
                    (1.0, 0.0)
                } else {
                    (c * powc(x, c - 1.0), c * (c - 1.0) * powc(x, c - 2.0))
                }
            }
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Scale(k) => k * x,
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Sqrt => x.sqrt(),
            Unary::Abs => x.abs(),
            Unary::Pow(c) => powc(x, c),
        }
    }
}

fn powc(x: f64, c: f64) -> f64 {
    if c.fract() == 0.0 && c.abs() <= i32::MAX as f64 {
        x.powi(c as i32)
    } else {
        x.powf(c)
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Unary(u32, Unary),
    /// `Σ lhs[k]·rhs[k] (+ bias)`; operands are pairs in `Tape::operands`.
    Dot { start: u32, len: u32, bias: u32 },
    /// Value is one entry of the parent's tangent.
    TangentOf(u32, u32),
}

/// Append-only record of a computation on augmented scalars.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    input_dim: usize,
    width: usize,
    ops: Vec<Op>,
    values: Vec<f64>,
    tangent_slot: Vec<u32>,
    tangents: Vec<f64>,
    operands: Vec<u32>,
    param_leaves: Vec<u32>,
    zeros: Vec<f64>,
}

impl Tape {
    /// Tape whose tangents are full spatial gradients in `input_dim`
    /// dimensions, with room for `param_len` parameter leaves.
    pub fn new(input_dim: usize, param_len: usize) -> Self {
        Self::with_width(input_dim, input_dim, param_len)
    }

    /// Tape whose tangents have `width` entries, one per seed direction.
    /// Inputs are created with [`Tape::leaf_input_seeded`].
    pub fn with_width(input_dim: usize, width: usize, param_len: usize) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            input_dim,
            width,
            ops: Vec::new(),
            values: Vec::new(),
            tangent_slot: Vec::new(),
            tangents: Vec::new(),
            operands: Vec::new(),
            param_leaves: vec![NO_TANGENT; param_len],
            zeros: vec![0.0; width],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Number of entries in every tangent.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn param_len(&self) -> usize {
        self.param_leaves.len()
    }

    fn handle(&self, index: usize) -> AugmentedScalar {
        AugmentedScalar {
            tape: self.id,
            index: index as u32,
        }
    }

    fn check(&self, a: AugmentedScalar) -> Result<u32, AutodiffError> {
        if a.tape != self.id || a.index as usize >= self.ops.len() {
            return Err(AutodiffError::ForeignNode);
        }
        Ok(a.index)
    }

    #[inline]
    fn idx(&self, a: AugmentedScalar) -> u32 {
        debug_assert!(self.check(a).is_ok(), "scalar from another tape");
        a.index
    }

    /// Pushes a node; `tangent` is `None` when structurally zero.
    fn push(&mut self, op: Op, value: f64, tangent: Option<&[f64]>) -> AugmentedScalar {
        let slot = match tangent {
            Some(t) => {
                let slot = (self.tangents.len() / self.width.max(1)) as u32;
                self.tangents.extend_from_slice(t);
                slot
            }
            None => NO_TANGENT,
        };
        self.push_slot(op, value, slot)
    }

    fn push_slot(&mut self, op: Op, value: f64, slot: u32) -> AugmentedScalar {
        let index = self.ops.len();
        self.ops.push(op);
        self.values.push(value);
        self.tangent_slot.push(slot);
        self.handle(index)
    }

    /// Reserves a zeroed tangent for a new node and returns its offset.
    fn alloc_tangent(&mut self) -> (u32, usize) {
        let w = self.width;
        let offset = self.tangents.len();
        self.tangents.resize(offset + w, 0.0);
        ((offset / w.max(1)) as u32, offset)
    }

    #[inline]
    fn tangent_offset(&self, node: u32) -> Option<usize> {
        let slot = self.tangent_slot[node as usize];
        if slot == NO_TANGENT || self.width == 0 {
            None
        } else {
            Some(slot as usize * self.width)
        }
    }

    pub fn value(&self, a: AugmentedScalar) -> f64 {
        self.values[self.idx(a) as usize]
    }

    /// Tangent of `a`; structurally zero tangents read as a zero vector.
    pub fn tangent(&self, a: AugmentedScalar) -> &[f64] {
        match self.tangent_offset(self.idx(a)) {
            Some(o) => &self.tangents[o..o + self.width],
            None => &self.zeros,
        }
    }

    /// Input leaves for `coords`; the i-th carries tangent `e_i`.
    pub fn leaf_input(&mut self, coords: &[f64]) -> Result<Vec<AugmentedScalar>, AutodiffError> {
        if coords.len() != self.input_dim {
            return Err(AutodiffError::DimensionMismatch {
                expected: self.input_dim,
                got: coords.len(),
            });
        }
        if self.width != self.input_dim {
            return Err(AutodiffError::DimensionMismatch {
                expected: self.width,
                got: self.input_dim,
            });
        }
        let d = self.input_dim;
        let mut seeds = vec![0.0; d * d];
        for i in 0..d {
            seeds[i * d + i] = 1.0;
        }
        self.leaf_input_seeded(coords, &seeds)
    }

    /// Input leaves whose tangents are rows of `seeds` (`input_dim × width`,
    /// row-major). Row `i` holds the derivative of coordinate `i` along
    /// each seed direction.
    pub fn leaf_input_seeded(
        &mut self,
        coords: &[f64],
        seeds: &[f64],
    ) -> Result<Vec<AugmentedScalar>, AutodiffError> {
        if coords.len() != self.input_dim {
            return Err(AutodiffError::DimensionMismatch {
                expected: self.input_dim,
                got: coords.len(),
            });
        }
        if seeds.len() != self.input_dim * self.width {
            return Err(AutodiffError::DimensionMismatch {
                expected: self.input_dim * self.width,
                got: seeds.len(),
            });
        }
        let w = self.width;
        Ok(coords
            .iter()
            .enumerate()
            .map(|(i, &c)| self.push(Op::Leaf, c, Some(&seeds[i * w..(i + 1) * w])))
            .collect())
    }

    /// Leaf for parameter `param_index` with a zero tangent.
    pub fn leaf_param(
        &mut self,
        value: f64,
        param_index: usize,
    ) -> Result<AugmentedScalar, AutodiffError> {
        let len = self.param_leaves.len();
        let entry = self
            .param_leaves
            .get(param_index)
            .copied()
            .ok_or(AutodiffError::ParamOutOfRange {
                index: param_index,
                len,
            })?;
        if entry != NO_TANGENT {
            return Err(AutodiffError::DuplicateParam(param_index));
        }
        let leaf = self.push(Op::Leaf, value, None);
        self.param_leaves[param_index] = leaf.index;
        Ok(leaf)
    }

    /// Leaves for a whole parameter vector, in order.
    pub fn leaf_params(&mut self, params: &[f64]) -> Result<Vec<AugmentedScalar>, AutodiffError> {
        params
            .iter()
            .enumerate()
            .map(|(i, &v)| self.leaf_param(v, i))
            .collect()
    }

    pub fn constant(&mut self, value: f64) -> AugmentedScalar {
        self.push(Op::Leaf, value, None)
    }

    fn operand(&mut self, b: Operand) -> Result<AugmentedScalar, AutodiffError> {
        match b {
            Operand::Scalar(s) => {
                self.check(s)?;
                Ok(s)
            }
            Operand::Real(r) => Ok(self.constant(r)),
            Operand::None => Err(AutodiffError::InvalidOperand {
                op: "binary",
                value: f64::NAN,
            }),
        }
    }

    /// Dispatches one elementary operation, checking operand domains.
    pub fn arith(
        &mut self,
        a: AugmentedScalar,
        b: Operand,
        kind: ArithKind,
    ) -> Result<AugmentedScalar, AutodiffError> {
        self.check(a)?;
        match kind {
            ArithKind::Add => {
                let b = self.operand(b)?;
                Ok(self.add(a, b))
            }
            ArithKind::Sub => {
                let b = self.operand(b)?;
                Ok(self.sub(a, b))
            }
            ArithKind::Mul => {
                let b = self.operand(b)?;
                Ok(self.mul(a, b))
            }
            ArithKind::Div => {
                let b = self.operand(b)?;
                self.div(a, b)
            }
            ArithKind::PowConst => match b {
                Operand::Real(c) => self.powf(a, c),
                _ => Err(AutodiffError::InvalidOperand {
                    op: "pow_const",
                    value: f64::NAN,
                }),
            },
            ArithKind::Tanh => Ok(self.tanh(a)),
            ArithKind::Exp => Ok(self.exp(a)),
            ArithKind::Sqrt => self.sqrt(a),
            ArithKind::Abs => Ok(self.abs(a)),
        }
    }

    fn binary_tangent(
        &mut self,
        a: u32,
        b: u32,
        ca: f64,
        cb: f64,
    ) -> u32 {
        // tangent = ca·t_a + cb·t_b
        let ta = self.tangent_offset(a);
        let tb = self.tangent_offset(b);
        if ta.is_none() && tb.is_none() {
            return NO_TANGENT;
        }
        let (slot, out) = self.alloc_tangent();
        let w = self.width;
        if let Some(o) = ta {
            for j in 0..w {
                self.tangents[out + j] = ca * self.tangents[o + j];
            }
        }
        if let Some(o) = tb {
            for j in 0..w {
                self.tangents[out + j] += cb * self.tangents[o + j];
            }
        }
        slot
    }

    pub fn add(&mut self, a: AugmentedScalar, b: AugmentedScalar) -> AugmentedScalar {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let v = self.values[ia as usize] + self.values[ib as usize];
        let slot = self.binary_tangent(ia, ib, 1.0, 1.0);
        self.push_slot(Op::Add(ia, ib), v, slot)
    }

    pub fn sub(&mut self, a: AugmentedScalar, b: AugmentedScalar) -> AugmentedScalar {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let v = self.values[ia as usize] - self.values[ib as usize];
        let slot = self.binary_tangent(ia, ib, 1.0, -1.0);
        self.push_slot(Op::Sub(ia, ib), v, slot)
    }

    pub fn mul(&mut self, a: AugmentedScalar, b: AugmentedScalar) -> AugmentedScalar {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (va, vb) = (self.values[ia as usize], self.values[ib as usize]);
        let slot = self.binary_tangent(ia, ib, vb, va);
        self.push_slot(Op::Mul(ia, ib), va * vb, slot)
    }

    pub fn div(
        &mut self,
        a: AugmentedScalar,
        b: AugmentedScalar,
    ) -> Result<AugmentedScalar, AutodiffError> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (va, vb) = (self.values[ia as usize], self.values[ib as usize]);
        if vb == 0.0 {
            return Err(AutodiffError::InvalidOperand { op: "div", value: vb });
        }
        let q = va / vb;
        let slot = self.binary_tangent(ia, ib, 1.0 / vb, -q / vb);
        Ok(self.push_slot(Op::Div(ia, ib), q, slot))
    }

    fn unary(&mut self, a: AugmentedScalar, f: Unary) -> AugmentedScalar {
        let ia = self.idx(a);
        let x = self.values[ia as usize];
        let y = f.apply(x);
        let slot = match self.tangent_offset(ia) {
            Some(o) => {
                let (d1, _) = f.derivatives(x, y);
                let (slot, out) = self.alloc_tangent();
                for j in 0..self.width {
                    self.tangents[out + j] = d1 * self.tangents[o + j];
                }
                slot
            }
            None => NO_TANGENT,
        };
        self.push_slot(Op::Unary(ia, f), y, slot)
    }

    pub fn neg(&mut self, a: AugmentedScalar) -> AugmentedScalar {
        self.unary(a, Unary::Neg)
    }

    /// `k·a` for a real constant `k`.
    pub fn scale(&mut self, a: AugmentedScalar, k: f64) -> AugmentedScalar {
        self.unary(a, Unary::Scale(k))
    }

    pub fn tanh(&mut self, a: AugmentedScalar) -> AugmentedScalar {
        self.unary(a, Unary::Tanh)
    }

    pub fn exp(&mut self, a: AugmentedScalar) -> AugmentedScalar {
        self.unary(a, Unary::Exp)
    }

    pub fn abs(&mut self, a: AugmentedScalar) -> AugmentedScalar {
        self.unary(a, Unary::Abs)
    }

    pub fn sqrt(&mut self, a: AugmentedScalar) -> Result<AugmentedScalar, AutodiffError> {
        let v = self.value(a);
        if v < 0.0 {
            return Err(AutodiffError::InvalidOperand { op: "sqrt", value: v });
        }
        Ok(self.unary(a, Unary::Sqrt))
    }

    /// `a^c`. Integer exponents accept any base; otherwise the base must be
    /// positive, or zero when `c ≥ 1`.
    pub fn powf(&mut self, a: AugmentedScalar, c: f64) -> Result<AugmentedScalar, AutodiffError> {
        let v = self.value(a);
        let integer = c.fract() == 0.0;
        if !integer && (v < 0.0 || (v == 0.0 && c < 1.0)) {
            return Err(AutodiffError::InvalidOperand {
                op: "pow_const",
                value: v,
            });
        }
        if integer && c < 0.0 && v == 0.0 {
            return Err(AutodiffError::InvalidOperand {
                op: "pow_const",
                value: v,
            });
        }
        Ok(self.unary(a, Unary::Pow(c)))
    }

    /// `Σₖ lhs[k]·rhs[k] + bias`, recorded as a single node.
    pub fn dot(
        &mut self,
        lhs: &[AugmentedScalar],
        rhs: &[AugmentedScalar],
        bias: Option<AugmentedScalar>,
    ) -> AugmentedScalar {
        assert_eq!(lhs.len(), rhs.len(), "dot operands differ in length");
        let start = self.operands.len() as u32;
        let mut value = 0.0;
        let mut any_tangent = false;
        for (&a, &b) in lhs.iter().zip(rhs) {
            let (ia, ib) = (self.idx(a), self.idx(b));
            value += self.values[ia as usize] * self.values[ib as usize];
            any_tangent |= self.tangent_slot[ia as usize] != NO_TANGENT
                || self.tangent_slot[ib as usize] != NO_TANGENT;
            self.operands.push(ia);
            self.operands.push(ib);
        }
        let bias_idx = match bias {
            Some(c) => {
                let ic = self.idx(c);
                value += self.values[ic as usize];
                any_tangent |= self.tangent_slot[ic as usize] != NO_TANGENT;
                ic
            }
            None => NO_TANGENT,
        };
        let slot = if any_tangent && self.width > 0 {
            let (slot, out) = self.alloc_tangent();
            let w = self.width;
            for k in 0..lhs.len() {
                let ia = self.operands[start as usize + 2 * k];
                let ib = self.operands[start as usize + 2 * k + 1];
                if let Some(o) = self.tangent_offset(ia) {
                    let vb = self.values[ib as usize];
                    for j in 0..w {
                        self.tangents[out + j] += vb * self.tangents[o + j];
                    }
                }
                if let Some(o) = self.tangent_offset(ib) {
                    let va = self.values[ia as usize];
                    for j in 0..w {
                        self.tangents[out + j] += va * self.tangents[o + j];
                    }
                }
            }
            if bias_idx != NO_TANGENT {
                if let Some(o) = self.tangent_offset(bias_idx) {
                    for j in 0..w {
                        self.tangents[out + j] += self.tangents[o + j];
                    }
                }
            }
            slot
        } else {
            NO_TANGENT
        };
        let op = Op::Dot {
            start,
            len: lhs.len() as u32,
            bias: bias_idx,
        };
        self.push_slot(op, value, slot)
    }

    /// Sum of `terms` in order; an empty sum is the constant zero.
    pub fn sum(&mut self, terms: &[AugmentedScalar]) -> AugmentedScalar {
        let mut iter = terms.iter();
        match iter.next() {
            None => self.constant(0.0),
            Some(&first) => iter.fold(first, |acc, &t| self.add(acc, t)),
        }
    }

    /// Entry `i` of `a`'s tangent as a scalar of its own. The result carries
    /// no tangent: second spatial derivatives are not tracked.
    pub fn tangent_entry(
        &mut self,
        a: AugmentedScalar,
        i: usize,
    ) -> Result<AugmentedScalar, AutodiffError> {
        let ia = self.check(a)?;
        if i >= self.width {
            return Err(AutodiffError::DimensionMismatch {
                expected: self.width,
                got: i + 1,
            });
        }
        let v = match self.tangent_offset(ia) {
            Some(o) => self.tangents[o + i],
            None => 0.0,
        };
        Ok(self.push(Op::TangentOf(ia, i as u32), v, None))
    }

    /// All tangent entries of `a` as scalars.
    pub fn tangent_entries(
        &mut self,
        a: AugmentedScalar,
    ) -> Result<Vec<AugmentedScalar>, AutodiffError> {
        (0..self.width).map(|i| self.tangent_entry(a, i)).collect()
    }

    /// Recomputes every node value from the recorded operations.
    pub fn replay(&self) -> Vec<f64> {
        let mut vals = Vec::with_capacity(self.values.len());
        let mut tans = vec![0.0; self.tangents.len()];
        let w = self.width;
        for (n, op) in self.ops.iter().enumerate() {
            let v = match *op {
                Op::Leaf => {
                    if let Some(o) = self.tangent_offset(n as u32) {
                        tans[o..o + w].copy_from_slice(&self.tangents[o..o + w]);
                    }
                    self.values[n]
                }
                Op::Add(a, b) => vals[a as usize] + vals[b as usize],
                Op::Sub(a, b) => vals[a as usize] - vals[b as usize],
                Op::Mul(a, b) => vals[a as usize] * vals[b as usize],
                Op::Div(a, b) => vals[a as usize] / vals[b as usize],
                Op::Unary(a, f) => f.apply(vals[a as usize]),
                Op::Dot { start, len, bias } => {
                    let mut acc = 0.0;
                    for k in 0..len as usize {
                        let ia = self.operands[start as usize + 2 * k] as usize;
                        let ib = self.operands[start as usize + 2 * k + 1] as usize;
                        acc += vals[ia] * vals[ib];
                    }
                    if bias != NO_TANGENT {
                        acc += vals[bias as usize];
                    }
                    acc
                }
                Op::TangentOf(a, i) => match self.tangent_offset(a) {
                    Some(o) => tans[o + i as usize],
                    None => 0.0,
                },
            };
            vals.push(v);
            // tangents of non-leaf nodes are needed by later TangentOf nodes
            if !matches!(op, Op::Leaf) {
                if let Some(o) = self.tangent_offset(n as u32) {
                    self.replay_tangent(n, &vals, &mut tans, o);
                }
            }
        }
        vals
    }

    fn replay_tangent(&self, n: usize, vals: &[f64], tans: &mut [f64], out: usize) {
        let w = self.width;
        let get = |node: u32| self.tangent_offset(node);
        match self.ops[n] {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (va, vb) = (vals[a as usize], vals[b as usize]);
                let (ca, cb) = match self.ops[n] {
                    Op::Add(..) => (1.0, 1.0),
                    Op::Sub(..) => (1.0, -1.0),
                    Op::Mul(..) => (vb, va),
                    _ => (1.0 / vb, -(va / vb) / vb),
                };
                for j in 0..w {
                    tans[out + j] = 0.0;
                }
                if let Some(o) = get(a) {
                    for j in 0..w {
                        tans[out + j] = ca * tans[o + j];
                    }
                }
                if let Some(o) = get(b) {
                    for j in 0..w {
                        tans[out + j] += cb * tans[o + j];
                    }
                }
            }
            Op::Unary(a, f) => {
                let (d1, _) = f.derivatives(vals[a as usize], vals[n]);
                let o = get(a).expect("unary tangent without parent tangent");
                for j in 0..w {
                    tans[out + j] = d1 * tans[o + j];
                }
            }
            Op::Dot { start, len, bias } => {
                for j in 0..w {
                    tans[out + j] = 0.0;
                }
                for k in 0..len as usize {
                    let ia = self.operands[start as usize + 2 * k];
                    let ib = self.operands[start as usize + 2 * k + 1];
                    if let Some(o) = get(ia) {
                        let vb = vals[ib as usize];
                        for j in 0..w {
                            tans[out + j] += vb * tans[o + j];
                        }
                    }
                    if let Some(o) = get(ib) {
                        let va = vals[ia as usize];
                        for j in 0..w {
                            tans[out + j] += va * tans[o + j];
                        }
                    }
                }
                if bias != NO_TANGENT {
                    if let Some(o) = get(bias) {
                        for j in 0..w {
                            tans[out + j] += tans[o + j];
                        }
                    }
                }
            }
            Op::Leaf | Op::TangentOf(..) => {}
        }
    }

    /// Gradient of `output`'s value with respect to every parameter leaf.
    /// Parameters without a leaf on this tape get a zero entry.
    pub fn backward(&self, output: AugmentedScalar) -> Result<GradientVector, AutodiffError> {
        let out = self.check(output)? as usize;
        let w = self.width;
        let mut vbar = vec![0.0; out + 1];
        let mut tbar = vec![0.0; self.tangents.len()];
        vbar[out] = 1.0;

        for n in (0..=out).rev() {
            let gv = vbar[n];
            let tn = self.tangent_offset(n as u32);
            // nothing flows into this node
            let live_t = tn.is_some_and(|o| tbar[o..o + w].iter().any(|&x| x != 0.0));
            if gv == 0.0 && !live_t {
                continue;
            }
            match self.ops[n] {
                Op::Leaf => {}
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sb = if matches!(self.ops[n], Op::Sub(..)) { -1.0 } else { 1.0 };
                    vbar[a as usize] += gv;
                    vbar[b as usize] += sb * gv;
                    if let (Some(to), true) = (tn, live_t) {
                        if let Some(oa) = self.tangent_offset(a) {
                            for j in 0..w {
                                tbar[oa + j] += tbar[to + j];
                            }
                        }
                        if let Some(ob) = self.tangent_offset(b) {
                            for j in 0..w {
                                tbar[ob + j] += sb * tbar[to + j];
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    self.mul_adjoint(a, b, gv, tn.filter(|_| live_t), &mut vbar, &mut tbar);
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.values[a as usize], self.values[b as usize]);
                    let q = va / vb;
                    vbar[a as usize] += gv / vb;
                    vbar[b as usize] -= q * gv / vb;
                    if let (Some(to), true) = (tn, live_t) {
                        let oa = self.tangent_offset(a);
                        let ob = self.tangent_offset(b);
                        // t = (t_a - q t_b) / v_b
                        let ta_dot = oa.map_or(0.0, |o| dotw(&self.tangents[o..o + w], &tbar[to..to + w]));
                        let tb_dot = ob.map_or(0.0, |o| dotw(&self.tangents[o..o + w], &tbar[to..to + w]));
                        let vb2 = vb * vb;
                        vbar[a as usize] += -tb_dot / vb2;
                        vbar[b as usize] += -ta_dot / vb2 + 2.0 * q * tb_dot / vb2;
                        if let Some(o) = oa {
                            for j in 0..w {
                                tbar[o + j] += tbar[to + j] / vb;
                            }
                        }
                        if let Some(o) = ob {
                            for j in 0..w {
                                tbar[o + j] -= q * tbar[to + j] / vb;
                            }
                        }
                    }
                }
                Op::Unary(a, f) => {
                    let x = self.values[a as usize];
                    let (d1, d2) = f.derivatives(x, self.values[n]);
                    vbar[a as usize] += d1 * gv;
                    if let (Some(to), true) = (tn, live_t) {
                        let oa = self.tangent_offset(a).expect("unary tangent without parent");
                        if d2 != 0.0 {
                            vbar[a as usize] +=
                                d2 * dotw(&self.tangents[oa..oa + w], &tbar[to..to + w]);
                        }
                        for j in 0..w {
                            tbar[oa + j] += d1 * tbar[to + j];
                        }
                    }
                }
                Op::Dot { start, len, bias } => {
                    let live = tn.filter(|_| live_t);
                    for k in 0..len as usize {
                        let a = self.operands[start as usize + 2 * k];
                        let b = self.operands[start as usize + 2 * k + 1];
                        self.mul_adjoint(a, b, gv, live, &mut vbar, &mut tbar);
                    }
                    if bias != NO_TANGENT {
                        vbar[bias as usize] += gv;
                        if let (Some(to), Some(ob)) = (live, self.tangent_offset(bias)) {
                            for j in 0..w {
                                tbar[ob + j] += tbar[to + j];
                            }
                        }
                    }
                }
                Op::TangentOf(a, i) => {
                    if let Some(oa) = self.tangent_offset(a) {
                        tbar[oa + i as usize] += gv;
                    }
                }
            }
        }

        let grad = self
            .param_leaves
            .iter()
            .map(|&leaf| {
                if leaf == NO_TANGENT || leaf as usize > out {
                    0.0
                } else {
                    vbar[leaf as usize]
                }
            })
            .collect();
        Ok(GradientVector(grad))
    }

    #[inline]
    fn mul_adjoint(
        &self,
        a: u32,
        b: u32,
        gv: f64,
        tout: Option<usize>,
        vbar: &mut [f64],
        tbar: &mut [f64],
    ) {
        let w = self.width;
        let (va, vb) = (self.values[a as usize], self.values[b as usize]);
        vbar[a as usize] += vb * gv;
        vbar[b as usize] += va * gv;
        let Some(to) = tout else { return };
        // t = v_a t_b + v_b t_a
        let oa = self.tangent_offset(a);
        let ob = self.tangent_offset(b);
        if let Some(o) = ob {
            let mut s = 0.0;
            for j in 0..w {
                s += self.tangents[o + j] * tbar[to + j];
                tbar[o + j] += va * tbar[to + j];
            }
            vbar[a as usize] += s;
        }
        if let Some(o) = oa {
            let mut s = 0.0;
            for j in 0..w {
                s += self.tangents[o + j] * tbar[to + j];
                tbar[o + j] += vb * tbar[to + j];
            }
            vbar[b as usize] += s;
        }
    }
}

#[inline]
fn dotw(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
