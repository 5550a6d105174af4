use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::data::{sample_batch, LabeledDataset, SamplerState};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::rng::RngStream;
use crate::scalar::Scalar;

use super::step::{ba_step, ba_step_accumulate, forward_mode, StepInputs, StepMetrics};
use super::{lr_at, regime_adaptation, total_iterations, OptState, TrainConfig};

const DIVERGENCE_FACTOR: f64 = 1e4;
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// One augmented copy per sample (M forced to 1).
    Plain,
    /// `M` replicas per sample in one pass.
    Ba,
    /// `M` replicas per sample, gradient accumulated over sub-batches.
    BaAccumulate,
    /// `M·B` distinct samples, `M×` epochs, one replica.
    Ra,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Plain => "plain",
            TrainMode::Ba => "ba",
            TrainMode::BaAccumulate => "ba_accumulate",
            TrainMode::Ra => "ra",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "plain" => Ok(TrainMode::Plain),
            "ba" => Ok(TrainMode::Ba),
            "ba_accumulate" => Ok(TrainMode::BaAccumulate),
            "ra" => Ok(TrainMode::Ra),
            other => Err(Error::Config(format!(
                "unknown training mode `{other}` (expected plain, ba, ba_accumulate or ra)"
            ))),
        }
    }
}

/// One CSV row. Epoch rows carry integer epochs and validation error; step rows carry
/// the fractional epoch position of the step and leave validation empty.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub epoch: f64,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_err: f64,
    pub val_err: Option<f64>,
    pub grad_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub mode: TrainMode,
    /// Configuration actually run (after regime adaptation for `Ra`).
    pub config: TrainConfig,
    /// Row 0 is the evaluation before training; row `e` closes epoch `e`.
    pub epochs: Vec<ReportRow>,
    pub steps: Vec<ReportRow>,
    pub grad_norms: Vec<f64>,
    pub iterations: u64,
    pub peak_activations: usize,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn final_val_err(&self) -> Option<f64> {
        self.epochs.last().and_then(|r| r.val_err)
    }

    /// Everything except wall time, for determinism checks.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.mode == other.mode
            && self.config == other.config
            && self.epochs == other.epochs
            && self.steps == other.steps
            && self.grad_norms == other.grad_norms
    }
}

pub struct TrainOutcome<T> {
    pub report: TrainReport,
    pub model: Model<T>,
}

/// Full training loop: `epochs × ⌈N/B⌉` steps, eval-mode validation after every epoch.
pub fn train<T: Scalar>(
    train_set: &LabeledDataset<T>,
    val_set: Option<&LabeledDataset<T>>,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    mode: TrainMode,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let cfg = match mode {
        TrainMode::Plain => TrainConfig {
            replicas: 1,
            ..cfg.clone()
        },
        TrainMode::Ba | TrainMode::BaAccumulate => cfg.clone(),
        TrainMode::Ra => regime_adaptation(cfg, cfg.replicas)?,
    };
    cfg.validate()?;
    if cfg.batch_size > train_set.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} training samples",
            cfg.batch_size,
            train_set.len()
        )));
    }
    if mode == TrainMode::BaAccumulate && cfg.batch_size % cfg.ghost_size != 0 {
        return Err(Error::Config(format!(
            "accumulation needs the ghost size {} to divide the batch {}",
            cfg.ghost_size, cfg.batch_size
        )));
    }
    let spec = spec.with_ghost_size(cfg.ghost_size);
    let started = Instant::now();
    let mut model = Model::<T>::new(spec, cfg.init_seed);
    let mut state = OptState::new(&model.params);
    let mut sampler =
        SamplerState::from_seed(train_set.len(), cfg.sampler_seed, cfg.with_replacement);
    let root = RngStream::new(cfg.aug_seed);
    let (aug, dropout) = (root.split("aug"), root.split("dropout"));
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let fmode = forward_mode(&cfg);
    let val_err = |m: &Model<T>| -> Result<Option<f64>> {
        val_set
            .map(|v| m.evaluate(&v.images, &v.labels, EVAL_CHUNK).map(|r| r.1))
            .transpose()
    };

    let (init_loss, init_err) = model.evaluate(&train_set.images, &train_set.labels, EVAL_CHUNK)?;
    let mut report = TrainReport {
        mode,
        config: cfg.clone(),
        epochs: vec![ReportRow {
            epoch: 0.0,
            step: 0,
            lr: lr_at(&cfg.schedule, cfg.base_lr, 0.0)?,
            train_loss: init_loss.to_f64().unwrap_or(f64::NAN),
            train_err: init_err,
            val_err: val_err(&model)?,
            grad_norm: None,
        }],
        steps: Vec::new(),
        grad_norms: Vec::with_capacity(total_iterations(&cfg, train_set.len()) as usize),
        iterations: 0,
        peak_activations: 0,
        wall_seconds: 0.0,
    };
    let mut first_loss: Option<f64> = None;
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut err_sum, mut norm_sum) = (0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for i in 0..steps_per_epoch {
            let global = state.step;
            // Midpoint of the step: never a zero warmup rate, milestones land on epoch boundaries.
            let position = epoch as f64 + (i as f64 + 0.5) / steps_per_epoch as f64;
            lr = lr_at(&cfg.schedule, cfg.base_lr, position)?;
            let batch = sample_batch(train_set, &mut sampler, cfg.batch_size)?;
            let inp = StepInputs {
                transform: &cfg.transform,
                replicas: cfg.replicas,
                chunk: cfg.chunk(),
                aug: &aug,
                dropout: &dropout,
                step: global,
                mode: fmode,
            };
            let m: StepMetrics = match mode {
                TrainMode::BaAccumulate => {
                    ba_step_accumulate(&mut model, &mut state, &batch, &inp, lr, &cfg)?
                }
                _ => ba_step(&mut model, &mut state, &batch, &inp, lr, &cfg)?,
            };
            let reference = *first_loss.get_or_insert(m.loss);
            if !m.loss.is_finite() || m.loss > DIVERGENCE_FACTOR * reference {
                return Err(Error::Diverged(format!(
                    "loss {} at step {} (initial {reference})",
                    m.loss, global
                )));
            }
            loss_sum += m.loss;
            err_sum += m.err;
            norm_sum += m.grad_norm;
            report.grad_norms.push(m.grad_norm);
            report.peak_activations = report.peak_activations.max(m.activations);
            if cfg.log_steps {
                report.steps.push(ReportRow {
                    epoch: position,
                    step: state.step,
                    lr,
                    train_loss: m.loss,
                    train_err: m.err,
                    val_err: None,
                    grad_norm: Some(m.grad_norm),
                });
            }
        }
        state.epoch += 1;
        let k = steps_per_epoch as f64;
        report.epochs.push(ReportRow {
            epoch: (epoch + 1) as f64,
            step: state.step,
            lr,
            train_loss: loss_sum / k,
            train_err: err_sum / k,
            val_err: val_err(&model)?,
            grad_norm: Some(norm_sum / k),
        });
    }
    report.iterations = state.step;
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok(TrainOutcome { report, model })
}
