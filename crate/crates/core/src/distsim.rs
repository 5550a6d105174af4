//! In-process simulation of synchronous data-parallel batch augmentation: workers in a
//! group share a sampler seed (same samples), each draws its own augmentations, and
//! gradients are mean-reduced in worker order.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::augment::{augment_each, TransformSpec};
use crate::data::{gather, sample_batch, Batch, LabeledDataset, SamplerState};
use crate::error::{ensure, Error, Result};
use crate::model::{ForwardOptions, GroupStats, Model, ModelSpec};
use crate::optim::{
    ba_step_accumulate, lr_at, sgd_step, OptState, ScheduleSpec, StepInputs, TrainConfig,
};
use crate::rng::RngStream;
use crate::scalar::{checksum, l2_norm, mean_in_order, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WorkerConfig {
    pub worker_id: usize,
    pub group_id: usize,
    /// Shared by every worker of a group.
    pub sampler_seed: u64,
    /// Unique per worker.
    pub aug_seed: u64,
    pub local_batch: usize,
}

/// Worker `w` joins group `w / M`; samplers are keyed by group, augmentations by worker.
pub fn assign_seeds(
    workers: usize,
    replicas: usize,
    base_seed: u64,
    local_batch: usize,
) -> Result<Vec<WorkerConfig>> {
    if replicas == 0 || workers == 0 || !workers.is_multiple_of(replicas) {
        return Err(Error::Config(format!(
            "replica count M = {replicas} must divide the worker count W = {workers}"
        )));
    }
    if local_batch == 0 {
        return Err(Error::Config("local batch size must be positive".into()));
    }
    let base = RngStream::new(base_seed);
    let sampler = base.split("sampler");
    let aug = base.split("aug");
    Ok((0..workers)
        .map(|w| WorkerConfig {
            worker_id: w,
            group_id: w / replicas,
            sampler_seed: sampler.split_index((w / replicas) as u64).seed(),
            aug_seed: aug.split_index(w as u64).seed(),
            local_batch,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistConfig {
    pub workers: usize,
    pub replicas: usize,
    pub local_batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub init_seed: u64,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleSpec,
    pub transform: TransformSpec,
}

impl Default for DistConfig {
    fn default() -> Self {
        Self {
            workers: 8,
            replicas: 4,
            local_batch: 16,
            steps: 50,
            seed: 1,
            init_seed: 2,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: ScheduleSpec::constant(),
            transform: TransformSpec::standard(2),
        }
    }
}

impl DistConfig {
    pub fn groups(&self) -> usize {
        self.workers / self.replicas
    }

    /// Distinct samples per step across all groups.
    pub fn global_batch(&self) -> usize {
        self.groups() * self.local_batch
    }

    /// The equivalent monolithic configuration: `B = (W/M)·B_local`, ghost groups of `B_local`.
    pub fn monolithic(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.base_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.global_batch(),
            replicas: self.replicas,
            epochs: 0,
            schedule: self.schedule.clone(),
            ghost_size: self.local_batch,
            sampler_seed: self.seed,
            aug_seed: self.seed,
            init_seed: self.init_seed,
            transform: self.transform.clone(),
            decoupled_bn: false,
            with_replacement: false,
            log_steps: false,
        }
    }

    fn lr(&self, step: usize, samples: usize) -> Result<f64> {
        let per_epoch = samples.div_ceil(self.global_batch());
        lr_at(
            &self.schedule,
            self.base_lr,
            (step as f64 + 0.5) / per_epoch as f64,
        )
    }
}

pub struct Worker<T> {
    pub config: WorkerConfig,
    pub model: Model<T>,
    pub opt: OptState<T>,
    sampler: SamplerState,
    aug: RngStream,
}

impl<T: Scalar> Worker<T> {
    pub fn new(config: WorkerConfig, spec: &ModelSpec, init_seed: u64, samples: usize) -> Self {
        let model = Model::new(spec.with_ghost_size(config.local_batch), init_seed);
        let opt = OptState::new(&model.params);
        Self {
            sampler: SamplerState::new(samples, RngStream::new(config.sampler_seed), false),
            aug: RngStream::new(config.aug_seed),
            config,
            model,
            opt,
        }
    }

    pub fn checksum(&self) -> u64 {
        checksum(self.model.params.flat())
    }
}

struct LocalResult<T> {
    indices: Vec<usize>,
    grad: Vec<T>,
    bn_stats: Vec<(usize, Vec<GroupStats<T>>)>,
}

/// One synchronous step: per-worker data, augmentation and ghost-normalized gradient,
/// then a fixed-order mean and the same update on every worker.
#[derive(Clone, Debug)]
pub struct StepAggregate<T> {
    pub step: usize,
    pub local_grads: Vec<Vec<T>>,
    pub mean_grad: Vec<T>,
    pub indices: Vec<Vec<usize>>,
    pub checksum: u64,
}

pub fn dist_step<T: Scalar>(
    workers: &mut [Worker<T>],
    ds: &LabeledDataset<T>,
    cfg: &DistConfig,
    step: usize,
) -> Result<StepAggregate<T>> {
    ensure!(
        workers.len() == cfg.workers,
        "expected {} workers, got {}",
        cfg.workers,
        workers.len()
    );
    let reference = workers[0].checksum();
    if let Some(w) = workers.iter().find(|w| w.checksum() != reference) {
        return Err(Error::Consistency {
            step: step as u64,
            detail: format!(
                "worker {} starts the step with different parameters",
                w.config.worker_id
            ),
        });
    }
    let global_b = cfg.global_batch();
    let dropout = RngStream::new(cfg.seed)
        .split("dropout")
        .split_index(step as u64);
    let results: Vec<LocalResult<T>> = workers
        .par_iter_mut()
        .map(|w| -> Result<LocalResult<T>> {
            let b = w.config.local_batch;
            let batch = sample_batch(ds, &mut w.sampler, b)?;
            let x = augment_each(
                &cfg.transform,
                &batch.images,
                &mut w.aug.split_index(step as u64),
            )?;
            let j = w.config.worker_id % cfg.replicas;
            let offset = (j * global_b + w.config.group_id * b) as u64;
            let opts = ForwardOptions::train(dropout.clone()).with_row_offset(offset);
            let g = w.model.batch_gradient(&x, &batch.labels, &opts)?;
            Ok(LocalResult {
                indices: batch.indices,
                grad: g.grad,
                bn_stats: g.bn_stats,
            })
        })
        .collect::<Result<_>>()?;
    let local_grads: Vec<Vec<T>> = results.iter().map(|r| r.grad.clone()).collect();
    let mean_grad = mean_in_order(&local_grads);
    // Ghost-group statistics in the monolithic (replica-major) order.
    let mut bn_stats: Vec<(usize, Vec<GroupStats<T>>)> = Vec::new();
    if let Some(first) = results.first() {
        for (k, (layer, _)) in first.bn_stats.iter().enumerate() {
            let mut groups = Vec::new();
            for j in 0..cfg.replicas {
                for g in 0..cfg.groups() {
                    groups.extend(results[g * cfg.replicas + j].bn_stats[k].1.iter().cloned());
                }
            }
            bn_stats.push((*layer, groups));
        }
    }
    let lr = cfg.lr(step, ds.len())?;
    workers.par_iter_mut().try_for_each(|w| -> Result<()> {
        sgd_step(
            &mut w.model.params,
            &mean_grad,
            &mut w.opt,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        )?;
        if !bn_stats.is_empty() {
            w.model.absorb_bn_stats(&[&bn_stats]);
        }
        Ok(())
    })?;
    let sum = workers[0].checksum();
    if let Some(w) = workers.iter().find(|w| w.checksum() != sum) {
        return Err(Error::Consistency {
            step: step as u64,
            detail: format!(
                "worker {} diverged from worker 0 after the update",
                w.config.worker_id
            ),
        });
    }
    Ok(StepAggregate {
        step,
        local_grads,
        mean_grad,
        indices: results.into_iter().map(|r| r.indices).collect(),
        checksum: sum,
    })
}

/// Monolithic batch augmentation driven by the same seeds: the step's `B` distinct samples
/// are the concatenated group batches, accumulated in `B_local` chunks.
pub struct Monolithic<T> {
    pub model: Model<T>,
    pub opt: OptState<T>,
    samplers: Vec<SamplerState>,
    aug: RngStream,
    dropout: RngStream,
}

impl<T: Scalar> Monolithic<T> {
    pub fn new(cfg: &DistConfig, spec: &ModelSpec, samples: usize) -> Result<Self> {
        let seeds = assign_seeds(cfg.workers, cfg.replicas, cfg.seed, cfg.local_batch)?;
        let samplers = seeds
            .iter()
            .filter(|w| w.worker_id % cfg.replicas == 0)
            .map(|w| SamplerState::new(samples, RngStream::new(w.sampler_seed), false))
            .collect();
        let model = Model::new(spec.with_ghost_size(cfg.local_batch), cfg.init_seed);
        let opt = OptState::new(&model.params);
        let base = RngStream::new(cfg.seed);
        Ok(Self {
            model,
            opt,
            samplers,
            aug: base.split("aug"),
            dropout: base.split("dropout"),
        })
    }

    pub fn step(
        &mut self,
        ds: &LabeledDataset<T>,
        cfg: &DistConfig,
        step: usize,
    ) -> Result<Batch<T>> {
        let mut indices = Vec::with_capacity(cfg.global_batch());
        for s in &mut self.samplers {
            indices.extend(s.next_indices(cfg.local_batch));
        }
        let batch = gather(ds, indices)?;
        let inp = StepInputs {
            transform: &cfg.transform,
            replicas: cfg.replicas,
            chunk: cfg.local_batch,
            aug: &self.aug,
            dropout: &self.dropout,
            step: step as u64,
            mode: crate::model::Mode::Train,
        };
        let lr = cfg.lr(step, ds.len())?;
        let train_cfg = cfg.monolithic();
        ba_step_accumulate(&mut self.model, &mut self.opt, &batch, &inp, lr, &train_cfg)?;
        Ok(batch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistStepRow {
    pub step: usize,
    pub worker: usize,
    pub local_grad_norm: f64,
    pub agg_grad_norm: f64,
    pub param_checksum: String,
}

#[derive(Clone, Debug)]
pub struct DistReport {
    pub rows: Vec<DistStepRow>,
    pub step_seconds: Vec<f64>,
    /// First step after which the distributed and monolithic parameters differ.
    pub first_mismatch: Option<usize>,
    pub final_checksum: u64,
    pub reference_checksum: u64,
    pub io: IoReport,
}

impl DistReport {
    pub fn bit_exact(&self) -> bool {
        self.first_mismatch.is_none()
    }
}

/// Runs `cfg.steps` distributed steps beside the monolithic reference and compares their
/// parameters bit for bit after every step.
pub fn run_equivalence<T: Scalar>(
    ds: &LabeledDataset<T>,
    spec: &ModelSpec,
    cfg: &DistConfig,
) -> Result<DistReport> {
    let seeds = assign_seeds(cfg.workers, cfg.replicas, cfg.seed, cfg.local_batch)?;
    if cfg.global_batch() > ds.len() {
        return Err(Error::Config(format!(
            "{} groups × {} samples exceed the {} available",
            cfg.groups(),
            cfg.local_batch,
            ds.len()
        )));
    }
    let mut workers: Vec<Worker<T>> = seeds
        .iter()
        .map(|c| Worker::new(c.clone(), spec, cfg.init_seed, ds.len()))
        .collect();
    let mut mono = Monolithic::new(cfg, spec, ds.len())?;
    let mut rows = Vec::new();
    let mut step_seconds = Vec::with_capacity(cfg.steps);
    let mut first_mismatch = None;
    for step in 0..cfg.steps {
        let start = Instant::now();
        let agg = dist_step(&mut workers, ds, cfg, step)?;
        step_seconds.push(start.elapsed().as_secs_f64());
        mono.step(ds, cfg, step)?;
        let same = mono
            .model
            .params
            .flat()
            .iter()
            .zip(workers[0].model.params.flat())
            .all(|(a, b)| a.bits() == b.bits());
        if !same && first_mismatch.is_none() {
            first_mismatch = Some(step);
        }
        let agg_norm = l2_norm(&agg.mean_grad).to_f64_lossless();
        for (w, g) in agg.local_grads.iter().enumerate() {
            rows.push(DistStepRow {
                step,
                worker: w,
                local_grad_norm: l2_norm(g).to_f64_lossless(),
                agg_grad_norm: agg_norm,
                param_checksum: format!("{:016x}", agg.checksum),
            });
        }
    }
    Ok(DistReport {
        rows,
        step_seconds,
        first_mismatch,
        final_checksum: workers[0].checksum(),
        reference_checksum: checksum(mono.model.params.flat()),
        io: io_dedup_report(&seeds, cfg.steps),
    })
}

/// Wall time of each of `cfg.steps` distributed steps, without the monolithic reference.
pub fn step_times<T: Scalar>(
    ds: &LabeledDataset<T>,
    spec: &ModelSpec,
    cfg: &DistConfig,
) -> Result<Vec<f64>> {
    let seeds = assign_seeds(cfg.workers, cfg.replicas, cfg.seed, cfg.local_batch)?;
    let mut workers: Vec<Worker<T>> = seeds
        .into_iter()
        .map(|c| Worker::new(c, spec, cfg.init_seed, ds.len()))
        .collect();
    (0..cfg.steps)
        .map(|step| {
            let start = Instant::now();
            dist_step(&mut workers, ds, cfg, step)?;
            Ok(start.elapsed().as_secs_f64())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct IoReport {
    pub total_loads: usize,
    pub unique_loads: usize,
}

/// Sample loads with and without sharing decoded batches among workers of a sampler group.
pub fn io_dedup_report(workers: &[WorkerConfig], steps: usize) -> IoReport {
    let total = workers.iter().map(|w| w.local_batch * steps).sum();
    let mut seen: Vec<u64> = Vec::new();
    let mut unique = 0;
    for w in workers {
        if !seen.contains(&w.sampler_seed) {
            seen.push(w.sampler_seed);
            unique += w.local_batch * steps;
        }
    }
    IoReport {
        total_loads: total,
        unique_loads: unique,
    }
}

/// Stacks one tensor per worker; used when inspecting what a group loaded.
pub fn stack_batches<T: Scalar>(batches: &[Tensor<T>]) -> Result<Tensor<T>> {
    Tensor::concat(batches)
}
