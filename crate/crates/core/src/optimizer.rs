//! Adam and the epoch loop: fresh Halton batch, loss and gradient, one step.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::loss::{loss_and_gradient, BoundaryTangent, LossBreakdown, LossError, NitscheWeights};
use crate::metrics::{ErrorEvaluator, ErrorReport};
use crate::network::{init_parameters, NetworkConfig, ParameterVector, ResNet};
use crate::problems::Problem;
use crate::sampling::BatchSampler;

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("gradient has {got} entries, parameters have {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite gradient entry {index} at step {step}")]
    NonFiniteGradient { index: usize, step: u64 },
    #[error("non-finite loss {value} at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, value: f64 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// One Adam update of `params` in place. A non-finite gradient leaves both
/// `params` and `state` untouched.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grad: &[f64],
) -> Result<(), OptimizerError> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(OptimizerError::LengthMismatch {
            expected: params.len(),
            got: grad.len(),
        });
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(OptimizerError::NonFiniteGradient {
            index,
            step: state.t + 1,
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grad)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingSchedule {
    pub epochs: usize,
    pub n_interior: usize,
    pub n_boundary: usize,
    pub eval_every: usize,
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        if self.n_interior == 0 || self.n_boundary == 0 || self.eval_every == 0 {
            return Err(OptimizerError::InvalidSchedule(format!(
                "n_interior={}, n_boundary={}, eval_every={} must be positive",
                self.n_interior, self.n_boundary, self.eval_every
            )));
        }
        Ok(())
    }

    /// Checkpoints are written every `10 · eval_every` epochs.
    pub fn checkpoint_every(&self) -> usize {
        10 * self.eval_every
    }

    fn records(&self, epoch: usize) -> bool {
        epoch.is_multiple_of(self.eval_every) || epoch == self.epochs
    }
}

/// Everything besides the problem that fixes a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingSetup {
    pub network: NetworkConfig,
    pub schedule: TrainingSchedule,
    pub beta: f64,
    pub seed: u64,
    pub learning_rate: f64,
    pub eval_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub errors: ErrorReport,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingRecord {
    pub rows: Vec<CurveRow>,
    /// Total loss of every epoch's batch, before that epoch's step.
    pub epoch_losses: Vec<f64>,
}

impl TrainingRecord {
    pub fn first(&self) -> Option<&CurveRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&CurveRow> {
        self.rows.last()
    }
}

/// Hooks called during [`train_with`].
pub trait TrainingObserver {
    fn on_row(&mut self, _row: &CurveRow) -> Result<(), OptimizerError> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint) -> Result<(), OptimizerError> {
        Ok(())
    }
}

impl TrainingObserver for () {}

pub struct TrainingOutcome {
    pub params: ParameterVector,
    pub adam: AdamState,
    pub record: TrainingRecord,
}

pub fn train(problem: &dyn Problem, setup: &TrainingSetup) -> Result<TrainingOutcome, OptimizerError> {
    train_with(problem, setup, &mut ())
}

/// Runs `schedule.epochs` Adam steps from the Glorot initialisation for
/// `seed`. Epoch `e` draws the `e`-th batch from the Halton streams, so the
/// run is a pure function of its inputs.
pub fn train_with(
    problem: &dyn Problem,
    setup: &TrainingSetup,
    observer: &mut dyn TrainingObserver,
) -> Result<TrainingOutcome, OptimizerError> {
    let schedule = setup.schedule;
    schedule.validate()?;
    let net = ResNet::new(setup.network).map_err(LossError::from)?;
    if setup.network.input_dim != problem.dim() {
        return Err(LossError::GeometryMismatch(format!(
            "network input dimension {} vs problem dimension {}",
            setup.network.input_dim,
            problem.dim()
        ))
        .into());
    }
    let evaluator = ErrorEvaluator::new(problem, setup.eval_points)
        .map_err(|e| OptimizerError::InvalidSchedule(e.to_string()))?;
    let weights = NitscheWeights::new(setup.beta, problem.geometry())?;
    let mut sampler = BatchSampler::new(problem.geometry());
    let mut params = init_parameters(&setup.network, setup.seed);
    let mut adam = AdamState::new(params.len(), setup.learning_rate);
    let mut record = TrainingRecord::default();

    for epoch in 0..=schedule.epochs {
        let batch = sampler.next_batch(schedule.n_interior, schedule.n_boundary);
        let (loss, grad) = loss_and_gradient(
            problem,
            &net,
            &params,
            &batch,
            &weights,
            BoundaryTangent::Directional,
        )?;
        if !loss.total.is_finite() {
            return Err(OptimizerError::NonFiniteLoss {
                epoch,
                value: loss.total,
            });
        }
        record.epoch_losses.push(loss.total);
        if schedule.records(epoch) {
            let row = CurveRow {
                epoch,
                loss,
                errors: evaluator.evaluate(&net, &params),
            };
            observer.on_row(&row)?;
            record.rows.push(row);
        }
        if epoch == schedule.epochs || (epoch > 0 && epoch % schedule.checkpoint_every() == 0) {
            observer.on_checkpoint(&Checkpoint {
                config: setup.network,
                seed: setup.seed,
                epoch: epoch as u64,
                params: params.0.clone(),
                adam: Some(adam.clone()),
            })?;
        }
        if epoch < schedule.epochs {
            adam_step(&mut adam, &mut params, &grad)?;
        }
    }
    Ok(TrainingOutcome {
        params,
        adam,
        record,
    })
}

/// Network parameters and optional Adam state after `epoch` steps.
///
/// Binary layout, little-endian: `u64` header `d, m, l, seed, epoch`, then the
/// flat parameter array as `f64`. If Adam state follows: `u64 t`, `f64 lr,
/// beta1, beta2, epsilon`, then `m` and `v`, each parameter-sized.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub seed: u64,
    pub epoch: u64,
    pub params: Vec<f64>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn write_to(&self, out: &mut impl Write) -> io::Result<()> {
        let c = self.config;
        for v in [
            c.input_dim as u64,
            c.width as u64,
            c.blocks as u64,
            self.seed,
            self.epoch,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        write_f64s(out, &self.params)?;
        if let Some(a) = &self.adam {
            out.write_all(&a.t.to_le_bytes())?;
            write_f64s(out, &[a.lr, a.beta1, a.beta2, a.epsilon])?;
            write_f64s(out, &a.m)?;
            write_f64s(out, &a.v)?;
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self, OptimizerError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let header: Vec<u64> = (0..5).map(|_| cur.u64()).collect::<Result<_, _>>()?;
        let config = NetworkConfig::new(header[0] as usize, header[1] as usize, header[2] as usize)
            .map_err(|e| OptimizerError::Checkpoint(e.to_string()))?;
        let n = config.param_count();
        let params = cur.f64s(n)?;
        let adam = if cur.remaining() == 0 {
            None
        } else {
            let t = cur.u64()?;
            let h = cur.f64s(4)?;
            Some(AdamState {
                m: cur.f64s(n)?,
                v: cur.f64s(n)?,
                t,
                lr: h[0],
                beta1: h[1],
                beta2: h[2],
                epsilon: h[3],
            })
        };
        if cur.remaining() != 0 {
            return Err(OptimizerError::Checkpoint(format!(
                "{} trailing bytes",
                cur.remaining()
            )));
        }
        Ok(Self {
            config,
            seed: header[3],
            epoch: header[4],
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), OptimizerError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, OptimizerError> {
        Self::read_from(&mut fs::File::open(path)?)
    }
}

fn write_f64s(out: &mut impl Write, values: &[f64]) -> io::Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take8(&mut self) -> Result<[u8; 8], OptimizerError> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + 8)
            .ok_or_else(|| OptimizerError::Checkpoint("truncated file".into()))?;
        self.pos += 8;
        Ok(chunk.try_into().expect("eight bytes"))
    }

    fn u64(&mut self) -> Result<u64, OptimizerError> {
        Ok(u64::from_le_bytes(self.take8()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, OptimizerError> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.take8()?))).collect()
    }
}
