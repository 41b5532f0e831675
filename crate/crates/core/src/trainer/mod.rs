//! Training loop: SGD with momentum, per-step cosine annealing, two learning
//! rates, checkpointing and gradient self-checks.
//!
//! Minibatch order is a pure function of `(seed, epoch)`, so a checkpoint
//! needs only parameters, momentum buffers and counters to resume exactly.

mod checkpoint;
mod gradcheck;

pub use checkpoint::{load_checkpoint, read_checkpoint_manifest, save_checkpoint, CheckpointManifest, CHECKPOINT_MAGIC};
pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};

use serde::{Deserialize, Serialize};

use crate::dataset::iterate_minibatches;
use crate::error::{invalid, Error, Result};
use crate::evaluation::EvalResult;
use crate::losses::{total_loss, BatchInputs, LossBreakdown, LossConfig};
use crate::pipeline::{evaluate, EvalOptions, TrainingData};
use crate::real::Real;
use crate::representation::{init_head, HeadDims, HeadGrads, HeadParameters, DEFAULT_D_CONTRAST, DEFAULT_D_PROJ};
use crate::seed;
use crate::spectral::{DEFAULT_BETA_C, DEFAULT_BETA_E};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(invalid!("precision must be f32 or f64, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_head: f64,
    /// Learning rate of the per-concept recalibration layer.
    pub lr_recalib: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(flatten)]
    pub loss: LossConfig,
    pub d_proj: usize,
    pub d_contrast: usize,
    pub beta_e: f64,
    pub beta_c: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Evaluate every this many epochs (and after the last one); 0 disables
    /// periodic evaluation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 128,
            lr_head: 0.1,
            lr_recalib: 5e-3,
            momentum: 0.9,
            weight_decay: 5e-5,
            loss: LossConfig::default(),
            d_proj: DEFAULT_D_PROJ,
            d_contrast: DEFAULT_D_CONTRAST,
            beta_e: DEFAULT_BETA_E,
            beta_c: DEFAULT_BETA_C,
            seed: 0,
            precision: Precision::F32,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    /// Settings sized for the synthetic generator on one core.
    pub fn desk_scale(n_samples: usize) -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 128.min(n_samples),
            d_proj: 128,
            d_contrast: 64,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid!("epochs must be at least 1"));
        }
        for (name, lr) in [("lr_head", self.lr_head), ("lr_recalib", self.lr_recalib)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(invalid!("{name} must be positive, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(invalid!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.d_proj == 0 || self.d_contrast == 0 {
            return Err(invalid!("head widths must be positive"));
        }
        if self.batch_size < 2 {
            return Err(invalid!("batch_size must be at least 2"));
        }
        self.loss.validate()
    }

    pub fn head_dims(&self, data: &TrainingData) -> HeadDims {
        HeadDims {
            n_concepts: data.n_concepts(),
            d_proj: self.d_proj,
            d_contrast: self.d_contrast,
            n_classes: data.n_classes(),
        }
    }

    fn batch_size_for(&self, n: usize) -> usize {
        self.batch_size.min(n)
    }
}

/// `base · (1 + cos(π · step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// Mean loss components over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean: LossBreakdown,
    pub lr_head: f64,
    pub lr_recalib: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub result: EvalResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub params: HeadParameters<T>,
    pub momentum: HeadGrads<T>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub history: Vec<EpochSummary>,
    pub evals: Vec<EvalRecord>,
    /// Best evaluation by All accuracy (earliest on ties).
    pub best: Option<EvalRecord>,
}

impl<T: Real> TrainState<T> {
    pub fn new(dims: HeadDims, seed: u64) -> Self {
        TrainState {
            params: init_head(dims, seed::derive(seed, "head-init", 0)),
            momentum: HeadGrads::zeros(dims),
            epoch: 0,
            step: 0,
            history: Vec::new(),
            evals: Vec::new(),
            best: None,
        }
    }

    pub fn last_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }
}

/// Progress notifications from [`run_until`].
#[derive(Debug)]
pub enum Event<'a> {
    Step {
        epoch: usize,
        step: usize,
        lr_head: f64,
        lr_recalib: f64,
        loss: &'a LossBreakdown,
    },
    Epoch(&'a EpochSummary),
    Eval(&'a EvalRecord),
}

/// In-place SGD with momentum and L2 weight decay folded into the gradient,
/// the same update as `torch.optim.SGD`.
fn sgd_step<T: Real>(state: &mut TrainState<T>, grads: &HeadGrads<T>, cfg: &TrainConfig, lr_head: f64, lr_recal: f64) {
    let mu = T::of(cfg.momentum);
    let wd = T::of(cfg.weight_decay);
    let grads = grads.tensors();
    let momenta = state.momentum.tensors_mut();
    for (((name, mut p), (_, g)), (_, mut m)) in state.params.tensors_mut().into_iter().zip(grads).zip(momenta) {
        let lr = T::of(if name.starts_with("recal.") { lr_recal } else { lr_head });
        ndarray::Zip::from(&mut p).and(&g).and(&mut m).for_each(|p, &g, m| {
            let d = g + wd * *p;
            *m = mu * *m + d;
            *p -= lr * *m;
        });
    }
    state.params.renormalize_prototypes();
}

fn numerical_failure(epoch: usize, step: usize, rows: &[usize], loss: &LossBreakdown) -> Error {
    let snapshot = serde_json::to_string(loss).unwrap_or_default();
    Error::Numerical(format!(
        "non-finite loss or gradient at epoch {epoch}, step {step}; batch rows {:?}; losses {snapshot}",
        &rows[..rows.len().min(16)]
    ))
}

/// Trains from scratch for `cfg.epochs`. Zero epochs returns the
/// initialized state.
pub fn train<T: Real>(data: &TrainingData, cfg: &TrainConfig) -> Result<TrainState<T>> {
    let mut state = TrainState::new(cfg.head_dims(data), cfg.seed);
    if cfg.epochs == 0 {
        return Ok(state);
    }
    run_until(&mut state, data, cfg, cfg.epochs, &mut |_| {})?;
    Ok(state)
}

/// Continues `state` through epoch `stop_epoch` (exclusive upper bound on
/// completed epochs), using the schedule of a `cfg.epochs`-long run.
pub fn run_until<T: Real>(
    state: &mut TrainState<T>,
    data: &TrainingData,
    cfg: &TrainConfig,
    stop_epoch: usize,
    observer: &mut dyn FnMut(Event<'_>),
) -> Result<()> {
    cfg.validate()?;
    let dims = cfg.head_dims(data);
    if state.params.dims != dims {
        return Err(invalid!("state head {:?} does not match data/config {:?}", state.params.dims, dims));
    }
    if stop_epoch > cfg.epochs {
        return Err(invalid!("stop epoch {stop_epoch} beyond configured {}", cfg.epochs));
    }
    let n = data.n_samples();
    let batch_size = cfg.batch_size_for(n);
    let steps_per_epoch = n.div_ceil(batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let labels = data.bundle.labels();
    let mask = data.bundle.is_labeled();

    while state.epoch < stop_epoch {
        let epoch = state.epoch;
        let batches = iterate_minibatches(&data.bundle, batch_size, seed::derive(cfg.seed, "epoch", epoch as u64))?;
        let mut sum = LossBreakdown::default();
        let mut lrs = (0.0, 0.0);
        for batch in &batches {
            let rows = batch.sample_indices();
            let (z_a, z_b, z_t) = data.gather::<T>(rows, batch.view_b_index());
            let batch_labels: Vec<Option<u32>> = rows.iter().map(|&i| mask[i].then_some(labels[i])).collect();
            let inputs = BatchInputs {
                z_a: z_a.view(),
                z_b: z_b.view(),
                z_teacher: z_t.view(),
                labels: &batch_labels,
            };
            let (loss, grads) = total_loss(&state.params, &inputs, &cfg.loss)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(numerical_failure(epoch, state.step, rows, &loss));
            }
            let lr_head = cosine_lr(state.step, total_steps, cfg.lr_head);
            let lr_recal = cosine_lr(state.step, total_steps, cfg.lr_recalib);
            sgd_step(state, &grads, cfg, lr_head, lr_recal);
            if !state.params.is_finite() {
                return Err(numerical_failure(epoch, state.step, rows, &loss));
            }
            observer(Event::Step {
                epoch,
                step: state.step,
                lr_head,
                lr_recalib: lr_recal,
                loss: &loss,
            });
            accumulate(&mut sum, &loss);
            lrs = (lr_head, lr_recal);
            state.step += 1;
        }
        let summary = EpochSummary {
            epoch,
            mean: scaled(&sum, 1.0 / batches.len() as f64, &cfg.loss),
            lr_head: lrs.0,
            lr_recalib: lrs.1,
        };
        observer(Event::Epoch(&summary));
        state.history.push(summary);
        state.epoch += 1;

        let due = cfg.eval_every > 0 && state.epoch.is_multiple_of(cfg.eval_every);
        if due || state.epoch == cfg.epochs {
            let result = evaluate(&state.params, data, &cfg.loss.temperatures, EvalOptions::default())?;
            let record = EvalRecord {
                epoch: state.epoch,
                result,
            };
            observer(Event::Eval(&record));
            let better = state.best.as_ref().is_none_or(|b| record.result.acc_all > b.result.acc_all);
            if better {
                state.best = Some(record.clone());
            }
            state.evals.push(record);
        }
    }
    Ok(())
}

fn accumulate(sum: &mut LossBreakdown, x: &LossBreakdown) {
    sum.l_sup_con += x.l_sup_con;
    sum.l_unsup_con += x.l_unsup_con;
    sum.l_sup_cls += x.l_sup_cls;
    sum.l_unsup_cls += x.l_unsup_cls;
    sum.l_unsup_ce += x.l_unsup_ce;
    sum.mean_entropy += x.mean_entropy;
    sum.l_fd += x.l_fd;
    sum.l_rd += x.l_rd;
    sum.total += x.total;
    sum.fd_weight = x.fd_weight;
    sum.rd_weight = x.rd_weight;
}

fn scaled(sum: &LossBreakdown, f: f64, cfg: &LossConfig) -> LossBreakdown {
    LossBreakdown {
        l_sup_con: sum.l_sup_con * f,
        l_unsup_con: sum.l_unsup_con * f,
        l_sup_cls: sum.l_sup_cls * f,
        l_unsup_cls: sum.l_unsup_cls * f,
        l_unsup_ce: sum.l_unsup_ce * f,
        mean_entropy: sum.mean_entropy * f,
        l_fd: sum.l_fd * f,
        l_rd: sum.l_rd * f,
        total: sum.total * f,
        lambda: cfg.lambda,
        epsilon: cfg.epsilon,
        fd_weight: sum.fd_weight,
        rd_weight: sum.rd_weight,
    }
}
