//! Residual tanh network used as the trial-function family.
//!
//! `s₁ = tanh(W₁x + b₁)`, then `l` blocks
//! `s_{i+1} = tanh(W_{2,i} tanh(W_{1,i} s_i + b_{1,i}) + b_{2,i}) + s_i`,
//! and a scalar output `û = W₂ s_{l+1} + b₂`. There is no activation after
//! the residual sum.

use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AugmentedScalar, AutodiffError, Tape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} parameters, got {got}")]
    ParamLength { expected: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub width: usize,
    pub blocks: usize,
}

impl NetworkConfig {
    pub fn new(input_dim: usize, width: usize, blocks: usize) -> Result<Self, NetworkError> {
        let config = Self {
            input_dim,
            width,
            blocks,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.input_dim == 0 || self.width == 0 || self.blocks == 0 {
            return Err(NetworkError::InvalidConfig(format!(
                "d={}, m={}, l={} must all be at least 1",
                self.input_dim, self.width, self.blocks
            )));
        }
        Ok(())
    }

    /// `m(d+1) + 2·l·m(m+1) + (m+1)`.
    pub fn param_count(&self) -> usize {
        let (d, m, l) = (self.input_dim, self.width, self.blocks);
        m * (d + 1) + 2 * l * m * (m + 1) + (m + 1)
    }

    pub fn layout(&self) -> Layout {
        Layout::new(*self)
    }
}

/// Offsets of each tensor inside the flat parameter vector.
///
/// Order: `W₁` (m×d, row-major), `b₁`, then per block `W_{1,i}`, `b_{1,i}`,
/// `W_{2,i}`, `b_{2,i}`, then `W₂` (1×m) and `b₂`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub input: Affine,
    pub blocks: Vec<(Affine, Affine)>,
    pub output: Affine,
    pub len: usize,
}

/// One affine map `W x + b` with `W` of shape `rows × cols`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub weight: usize,
    pub bias: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Affine {
    fn at(offset: &mut usize, rows: usize, cols: usize) -> Self {
        let weight = *offset;
        let bias = weight + rows * cols;
        *offset = bias + rows;
        Self {
            weight,
            bias,
            rows,
            cols,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * (self.cols + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    fn weight_row(&self, r: usize) -> std::ops::Range<usize> {
        let start = self.weight + r * self.cols;
        start..start + self.cols
    }
}

impl Layout {
    fn new(config: NetworkConfig) -> Self {
        let (d, m) = (config.input_dim, config.width);
        let mut offset = 0;
        let input = Affine::at(&mut offset, m, d);
        let blocks = (0..config.blocks)
            .map(|_| {
                let first = Affine::at(&mut offset, m, m);
                let second = Affine::at(&mut offset, m, m);
                (first, second)
            })
            .collect();
        let output = Affine::at(&mut offset, 1, m);
        Self {
            input,
            blocks,
            output,
            len: offset,
        }
    }

    pub fn affines(&self) -> impl Iterator<Item = &Affine> {
        std::iter::once(&self.input)
            .chain(self.blocks.iter().flat_map(|(a, b)| [a, b]))
            .chain(std::iter::once(&self.output))
    }
}

/// Flat vector of all trainable parameters in [`Layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector(pub Vec<f64>);

impl ParameterVector {
    pub fn zeros(config: &NetworkConfig) -> Self {
        Self(vec![0.0; config.param_count()])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ParameterVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParameterVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_parameters(config: &NetworkConfig, seed: u64) -> ParameterVector {
    let layout = config.layout();
    let mut params = ParameterVector::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for affine in layout.affines() {
        let bound = glorot_bound(affine);
        for w in &mut params[affine.weight..affine.bias] {
            *w = rng.gen_range(-bound..=bound);
        }
    }
    params
}

pub fn glorot_bound(affine: &Affine) -> f64 {
    (6.0 / (affine.cols + affine.rows) as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct ResNet {
    config: NetworkConfig,
    layout: Layout,
}

impl ResNet {
    pub fn new(config: NetworkConfig) -> Result<Self, NetworkError> {
        config.validate()?;
        Ok(Self {
            layout: config.layout(),
            config,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.len
    }

    fn check_params<T>(&self, params: &[T]) -> Result<(), NetworkError> {
        if params.len() != self.layout.len {
            return Err(NetworkError::ParamLength {
                expected: self.layout.len,
                got: params.len(),
            });
        }
        Ok(())
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn register(
        &self,
        tape: &mut Tape,
        params: &[f64],
    ) -> Result<Vec<AugmentedScalar>, NetworkError> {
        self.check_params(params)?;
        Ok(tape.leaf_params(params)?)
    }

    /// `û(x)` recorded on `tape` from parameter leaves returned by
    /// [`ResNet::register`] and input scalars `x`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        leaves: &[AugmentedScalar],
        x: &[AugmentedScalar],
    ) -> Result<AugmentedScalar, NetworkError> {
        self.check_params(leaves)?;
        if x.len() != self.config.input_dim {
            return Err(AutodiffError::DimensionMismatch {
                expected: self.config.input_dim,
                got: x.len(),
            }
            .into());
        }
        let affine = |tape: &mut Tape, a: &Affine, input: &[AugmentedScalar]| {
            (0..a.rows)
                .map(|r| {
                    let z = tape.dot(&leaves[a.weight_row(r)], input, Some(leaves[a.bias + r]));
                    tape.tanh(z)
                })
                .collect::<Vec<_>>()
        };
        let mut s = affine(tape, &self.layout.input, x);
        for (first, second) in &self.layout.blocks {
            let h = affine(tape, first, &s);
            let z = affine(tape, second, &h);
            s = z.iter().zip(&s).map(|(&zi, &si)| tape.add(zi, si)).collect();
        }
        let out = &self.layout.output;
        Ok(tape.dot(&leaves[out.weight_row(0)], &s, Some(leaves[out.bias])))
    }

    /// Convenience: register `params` and evaluate at plain coordinates on a
    /// fresh full-gradient tape entry.
    pub fn forward_point(
        &self,
        tape: &mut Tape,
        leaves: &[AugmentedScalar],
        coords: &[f64],
    ) -> Result<AugmentedScalar, NetworkError> {
        let x = tape.leaf_input(coords)?;
        self.forward(tape, leaves, &x)
    }

    /// Tape-free value, with the same floating-point operation order as
    /// [`ResNet::forward`].
    pub fn eval(&self, params: &[f64], x: &[f64]) -> f64 {
        let mut scratch = Scratch::default();
        self.eval_with_grad_into(params, x, &mut scratch, false);
        scratch.value
    }

    /// Tape-free value and spatial gradient.
    pub fn eval_with_grad(&self, params: &[f64], x: &[f64]) -> (f64, Vec<f64>) {
        let mut scratch = Scratch::default();
        self.eval_with_grad_into(params, x, &mut scratch, true);
        (scratch.value, scratch.grad.clone())
    }

    /// Allocation-reusing form used for large evaluation clouds.
    pub fn eval_with_grad_into(
        &self,
        params: &[f64],
        x: &[f64],
        scratch: &mut Scratch,
        with_grad: bool,
    ) {
        let d = self.config.input_dim;
        let m = self.config.width;
        let w = if with_grad { d } else { 0 };
        scratch.resize(m, w);
        let Scratch {
            s,
            ds,
            h,
            dh,
            z,
            dz,
            value,
            grad,
        } = scratch;

        // input layer: tangents of x are the identity
        let a = &self.layout.input;
        for r in 0..m {
            let row = &params[a.weight_row(r)];
            let mut acc = 0.0;
            for (wk, xk) in row.iter().zip(x) {
                acc += wk * xk;
            }
            acc += params[a.bias + r];
            let y = acc.tanh();
            s[r] = y;
            if with_grad {
                let t = &mut ds[r * w..(r + 1) * w];
                t.fill(0.0);
                for (k, &wk) in row.iter().enumerate() {
                    for (j, tj) in t.iter_mut().enumerate() {
                        *tj += wk * if j == k { 1.0 } else { 0.0 };
                    }
                }
                let slope = 1.0 - y * y;
                for tj in t.iter_mut() {
                    *tj *= slope;
                }
            }
        }
        for (first, second) in &self.layout.blocks {
            dense_tanh(params, first, s, ds, h, dh, w);
            dense_tanh(params, second, h, dh, z, dz, w);
            for r in 0..m {
                s[r] += z[r];
            }
            if with_grad {
                for (t, dzt) in ds.iter_mut().zip(dz.iter()) {
                    *t += dzt;
                }
            }
        }
        let out = &self.layout.output;
        let row = &params[out.weight_row(0)];
        let mut acc = 0.0;
        for (wk, sk) in row.iter().zip(s.iter()) {
            acc += wk * sk;
        }
        acc += params[out.bias];
        *value = acc;
        if with_grad {
            grad.clear();
            grad.resize(w, 0.0);
            for (k, &wk) in row.iter().enumerate() {
                for j in 0..w {
                    grad[j] += wk * ds[k * w + j];
                }
            }
        }
    }
}

fn dense_tanh(
    params: &[f64],
    a: &Affine,
    input: &[f64],
    dinput: &[f64],
    out: &mut [f64],
    dout: &mut [f64],
    w: usize,
) {
    for r in 0..a.rows {
        let row = &params[a.weight_row(r)];
        let mut acc = 0.0;
        for (wk, xk) in row.iter().zip(input) {
            acc += wk * xk;
        }
        acc += params[a.bias + r];
        let y = acc.tanh();
        out[r] = y;
        if w > 0 {
            let t = &mut dout[r * w..(r + 1) * w];
            t.fill(0.0);
            for (k, &wk) in row.iter().enumerate() {
                let dk = &dinput[k * w..(k + 1) * w];
                for j in 0..w {
                    t[j] += wk * dk[j];
                }
            }
            let slope = 1.0 - y * y;
            for tj in t.iter_mut() {
                *tj *= slope;
            }
        }
    }
}

/// Reusable buffers for [`ResNet::eval_with_grad_into`].
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    s: Vec<f64>,
    ds: Vec<f64>,
    h: Vec<f64>,
    dh: Vec<f64>,
    z: Vec<f64>,
    dz: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
}

impl Scratch {
    fn resize(&mut self, m: usize, w: usize) {
        for v in [&mut self.s, &mut self.h, &mut self.z] {
            v.resize(m, 0.0);
        }
        for v in [&mut self.ds, &mut self.dh, &mut self.dz] {
            v.resize(m * w, 0.0);
        }
    }
}
