//! SGD with momentum and weight decay, learning-rate schedules, the plain and
//! batch-augmented update rules, and the training loop.

mod step;
mod train;

use serde::{Deserialize, Serialize};

pub use step::{
    ba_accumulate_gradient, ba_gradient, ba_step, ba_step_accumulate, forward_mode, StepInputs,
    StepMetrics,
};
pub use train::{train, ReportRow, TrainMode, TrainOutcome, TrainReport};

use crate::augment::TransformSpec;
use crate::error::{ensure, Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ScheduleSpec {
    /// Divide by `factor` at each milestone epoch that has been reached.
    StepDecay { milestones: Vec<f64>, factor: f64 },
    /// Linear ramp from 0 to the base rate over `warmup_epochs`, then step decay.
    WarmupThenStep {
        warmup_epochs: f64,
        milestones: Vec<f64>,
        factor: f64,
    },
}

impl ScheduleSpec {
    pub fn constant() -> Self {
        ScheduleSpec::StepDecay {
            milestones: Vec::new(),
            factor: 1.0,
        }
    }

    pub fn milestones(&self) -> &[f64] {
        match self {
            ScheduleSpec::StepDecay { milestones, .. }
            | ScheduleSpec::WarmupThenStep { milestones, .. } => milestones,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (milestones, factor) = match self {
            ScheduleSpec::StepDecay { milestones, factor } => (milestones, *factor),
            ScheduleSpec::WarmupThenStep {
                warmup_epochs,
                milestones,
                factor,
            } => {
                if !(*warmup_epochs >= 0.0) {
                    return Err(Error::Config(format!(
                        "warmup epochs must be non-negative, got {warmup_epochs}"
                    )));
                }
                (milestones, *factor)
            }
        };
        if !(factor > 0.0) {
            return Err(Error::Config(format!(
                "decay factor must be positive, got {factor}"
            )));
        }
        if milestones.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config(format!(
                "milestones must be strictly increasing: {milestones:?}"
            )));
        }
        Ok(())
    }

    /// Same schedule with every epoch position multiplied by `k`.
    pub fn stretched(&self, k: f64) -> Self {
        match self {
            ScheduleSpec::StepDecay { milestones, factor } => ScheduleSpec::StepDecay {
                milestones: milestones.iter().map(|m| m * k).collect(),
                factor: *factor,
            },
            ScheduleSpec::WarmupThenStep {
                warmup_epochs,
                milestones,
                factor,
            } => ScheduleSpec::WarmupThenStep {
                warmup_epochs: warmup_epochs * k,
                milestones: milestones.iter().map(|m| m * k).collect(),
                factor: *factor,
            },
        }
    }
}

/// Learning rate at a (fractional) epoch position.
pub fn lr_at(schedule: &ScheduleSpec, base_lr: f64, epoch: f64) -> Result<f64> {
    ensure!(
        epoch >= 0.0,
        "epoch position must be non-negative, got {}",
        epoch
    );
    let decayed = |milestones: &[f64], factor: f64| {
        let passed = milestones.iter().filter(|&&m| epoch >= m).count();
        base_lr / factor.powi(passed as i32)
    };
    Ok(match schedule {
        ScheduleSpec::StepDecay { milestones, factor } => decayed(milestones, *factor),
        ScheduleSpec::WarmupThenStep {
            warmup_epochs,
            milestones,
            factor,
        } => {
            if epoch < *warmup_epochs {
                base_lr * epoch / warmup_epochs
            } else {
                decayed(milestones, *factor)
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub replicas: usize,
    pub epochs: usize,
    pub schedule: ScheduleSpec,
    pub ghost_size: usize,
    pub sampler_seed: u64,
    pub aug_seed: u64,
    pub init_seed: u64,
    pub transform: TransformSpec,
    /// Forward in eval mode during training steps: running batch-norm statistics, no dropout.
    pub decoupled_bn: bool,
    pub with_replacement: bool,
    /// Keep one row per step in the report.
    pub log_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            replicas: 1,
            epochs: 10,
            schedule: ScheduleSpec::constant(),
            ghost_size: 32,
            sampler_seed: 1,
            aug_seed: 2,
            init_seed: 3,
            transform: TransformSpec::Identity,
            decoupled_bn: false,
            with_replacement: false,
            log_steps: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 || self.replicas == 0 || self.ghost_size == 0 {
            return Err(Error::Config(
                "batch size, replicas and ghost size must be positive".into(),
            ));
        }
        let total = self.batch_size * self.replicas;
        if !total.is_multiple_of(self.ghost_size) {
            return Err(Error::Config(format!(
                "ghost size {} does not divide the augmented batch {}×{} = {total}",
                self.ghost_size, self.replicas, self.batch_size
            )));
        }
        self.schedule.validate()
    }

    /// Sub-batch size sharing one transform draw: the ghost group when it divides B, else B.
    pub fn chunk(&self) -> usize {
        if self.batch_size.is_multiple_of(self.ghost_size) {
            self.ghost_size
        } else {
            self.batch_size
        }
    }
}

/// Optimizer steps for `epochs` passes over `n` samples with batch `B`: `epochs · ⌈N/B⌉`.
pub fn total_iterations(cfg: &TrainConfig, n: usize) -> u64 {
    (cfg.epochs * n.div_ceil(cfg.batch_size)) as u64
}

/// The regime-adaptation baseline for a BA config: `M·B` distinct samples per step,
/// `M×` the epochs (schedule stretched to match), one replica.
pub fn regime_adaptation(cfg: &TrainConfig, replicas: usize) -> Result<TrainConfig> {
    ensure!(replicas >= 1, "replica count must be at least 1");
    if replicas == 1 {
        return Ok(cfg.clone());
    }
    let mut ra = cfg.clone();
    ra.batch_size = cfg.batch_size * replicas;
    ra.epochs = cfg.epochs * replicas;
    ra.schedule = cfg.schedule.stretched(replicas as f64);
    ra.replicas = 1;
    Ok(ra)
}

/// Heavy-ball momentum buffers aligned with the flat parameter view.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    pub velocity: Vec<T>,
    pub step: u64,
    pub epoch: u64,
    decay: Vec<bool>,
}

impl<T: Scalar> OptState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            velocity: vec![T::zero(); params.dim()],
            step: 0,
            epoch: 0,
            decay: params.decay_mask(),
        }
    }
}

/// `v ← μv + (g + wd·w)`, `w ← w − lr·v`, with the decay term only on decayed coordinates.
pub fn sgd_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grad: &[T],
    state: &mut OptState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    ensure!(
        grad.len() == params.dim() && state.velocity.len() == params.dim(),
        "gradient ({}) and momentum ({}) must match {} parameters",
        grad.len(),
        state.velocity.len(),
        params.dim()
    );
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Diverged(format!(
            "non-finite gradient at coordinate {i}, step {}",
            state.step
        )));
    }
    let (lr, mu, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    let w = params.flat_mut();
    for i in 0..w.len() {
        let mut g = grad[i];
        if state.decay[i] {
            g += wd * w[i];
        }
        let v = mu * state.velocity[i] + g;
        state.velocity[i] = v;
        w[i] -= lr * v;
    }
    state.step += 1;
    Ok(())
}
