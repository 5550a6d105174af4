use crate::augment::{augment_each, expand_batch_chunked, ReplicaStreams, TransformSpec};
use crate::data::Batch;
use crate::error::{ensure, Result};
use crate::model::{BatchGradient, ForwardOptions, GroupStats, Mode, Model};
use crate::rng::RngStream;
use crate::scalar::{l2_norm, mean_in_order, Scalar};

use super::{sgd_step, OptState, TrainConfig};

/// Randomness and layout of one batch-augmented step.
#[derive(Clone, Debug)]
pub struct StepInputs<'a> {
    pub transform: &'a TransformSpec,
    pub replicas: usize,
    /// Samples per transform draw; slot `c·M + j` augments chunk `c` for replica `j`.
    pub chunk: usize,
    /// Augmentation root; the step's slots come from `ReplicaStreams::new(aug, step)`.
    pub aug: &'a RngStream,
    /// Dropout root; the step's masks come from `dropout.split_index(step)`.
    pub dropout: &'a RngStream,
    pub step: u64,
    pub mode: Mode,
}

impl StepInputs<'_> {
    fn forward_options(&self, row_offset: u64) -> ForwardOptions {
        match self.mode {
            Mode::Eval => ForwardOptions::eval(),
            Mode::Train => ForwardOptions::train(self.dropout.split_index(self.step))
                .with_row_offset(row_offset),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    /// Top-1 error over the augmented batch.
    pub err: f64,
    pub grad_norm: f64,
    /// Peak number of activations held for one backward pass.
    pub activations: usize,
}

/// Train mode unless batch norm is decoupled from the batch.
pub fn forward_mode(cfg: &TrainConfig) -> Mode {
    if cfg.decoupled_bn {
        Mode::Eval
    } else {
        Mode::Train
    }
}

/// Mean gradient over the `M·B` augmented batch from one forward/backward pass.
pub fn ba_gradient<T: Scalar>(
    model: &Model<T>,
    batch: &Batch<T>,
    inp: &StepInputs<'_>,
) -> Result<BatchGradient<T>> {
    let streams = ReplicaStreams::new(inp.aug.clone(), inp.step);
    let (x, y) = expand_batch_chunked(
        inp.transform,
        &batch.images,
        &batch.labels,
        inp.replicas,
        inp.chunk,
        &streams,
    )?;
    model.batch_gradient(&x, &y, &inp.forward_options(0))
}

/// Same gradient as [`ba_gradient`], computed one `chunk`-sized sub-batch at a time and
/// reduced in chunk-major, replica-minor order.
pub fn ba_accumulate_gradient<T: Scalar>(
    model: &Model<T>,
    batch: &Batch<T>,
    inp: &StepInputs<'_>,
) -> Result<BatchGradient<T>> {
    let b = batch.images.batch();
    let (m, chunk) = (inp.replicas, inp.chunk);
    ensure!(m >= 1, "replica count must be at least 1");
    ensure!(
        chunk >= 1 && b.is_multiple_of(chunk),
        "chunk {} must divide batch {}",
        chunk,
        b
    );
    let streams = ReplicaStreams::new(inp.aug.clone(), inp.step);
    let chunks = b / chunk;
    let mut grads = Vec::with_capacity(chunks * m);
    let mut loss = T::zero();
    let mut correct = 0;
    let mut peak = 0;
    let mut stats: Vec<Vec<(usize, Vec<GroupStats<T>>)>> = Vec::with_capacity(chunks * m);
    for c in 0..chunks {
        let part = batch.images.slice_batch(c * chunk, (c + 1) * chunk)?;
        let labels = &batch.labels[c * chunk..(c + 1) * chunk];
        for j in 0..m {
            let mut s = streams.slot((c * m + j) as u64);
            let x = augment_each(inp.transform, &part, &mut s)?;
            let g = model.batch_gradient(
                &x,
                labels,
                &inp.forward_options((j * b + c * chunk) as u64),
            )?;
            loss += g.loss;
            correct += g.correct;
            peak = peak.max(g.activations);
            grads.push(g.grad);
            stats.push(g.bn_stats);
        }
    }
    // Ghost groups listed replica-major, as they sit in the monolithic batch.
    let mut bn_stats: Vec<(usize, Vec<GroupStats<T>>)> = Vec::new();
    if let Some(first) = stats.first() {
        for (k, (layer, _)) in first.iter().enumerate() {
            let mut groups = Vec::new();
            for j in 0..m {
                for c in 0..chunks {
                    groups.extend(stats[c * m + j][k].1.iter().cloned());
                }
            }
            bn_stats.push((*layer, groups));
        }
    }
    Ok(BatchGradient {
        loss: loss / T::from_usize(chunks * m).expect("fits"),
        correct,
        grad: mean_in_order(&grads),
        bn_stats,
        activations: peak,
    })
}

fn apply<T: Scalar>(
    model: &mut Model<T>,
    state: &mut OptState<T>,
    g: BatchGradient<T>,
    total: usize,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    let grad_norm = l2_norm(&g.grad).to_f64().unwrap_or(f64::NAN);
    sgd_step(
        &mut model.params,
        &g.grad,
        state,
        lr,
        cfg.momentum,
        cfg.weight_decay,
    )?;
    if !g.bn_stats.is_empty() {
        model.absorb_bn_stats(&[&g.bn_stats]);
    }
    Ok(StepMetrics {
        loss: g.loss.to_f64().unwrap_or(f64::NAN),
        err: 1.0 - g.correct as f64 / total as f64,
        grad_norm,
        activations: g.activations,
    })
}

/// One batch-augmented SGD step: expand to `M·B`, one pass, one update.
pub fn ba_step<T: Scalar>(
    model: &mut Model<T>,
    state: &mut OptState<T>,
    batch: &Batch<T>,
    inp: &StepInputs<'_>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    let g = ba_gradient(model, batch, inp)?;
    apply(model, state, g, inp.replicas * batch.labels.len(), lr, cfg)
}

/// One batch-augmented SGD step with the gradient accumulated over `M·B/chunk` sub-batches.
pub fn ba_step_accumulate<T: Scalar>(
    model: &mut Model<T>,
    state: &mut OptState<T>,
    batch: &Batch<T>,
    inp: &StepInputs<'_>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    let g = ba_accumulate_gradient(model, batch, inp)?;
    apply(model, state, g, inp.replicas * batch.labels.len(), lr, cfg)
}
