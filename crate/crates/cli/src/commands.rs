//! The five subcommands. Each one writes its CSV files and a `manifest.json` into the
//! output directory; the manifest is written even when the run fails.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use batchaug_core::data::{generate, load_idx, LabeledDataset, SyntheticParams};
use batchaug_core::diagnostics::{assumption_check, correlation_study, grad_norm_study, median};
use batchaug_core::distsim::{run_equivalence, step_times, DistConfig};
use batchaug_core::dynamics::{
    simulate, spectral_stats, stability_boundary, theorem_check, tightness_construct, Prediction,
    QuadraticProblem, SimOptions, Verdict,
};
use batchaug_core::model::{load_checkpoint, save_checkpoint, ForwardOptions, Model, ModelSpec};
use batchaug_core::optim::{forward_mode, train};
use batchaug_core::tensor::rng_normal;
use batchaug_core::{RngStream, Scalar};
use serde::Serialize;
use serde_json::json;

use crate::config::{DataSource, ExperimentConfig, Precision};
use crate::manifest::{RunManifest, Seeds};
use crate::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Dynamics,
    Correlate,
    Throughput,
    Distsim,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::Train => "train",
            Command::Dynamics => "dynamics",
            Command::Correlate => "correlate",
            Command::Throughput => "throughput",
            Command::Distsim => "distsim",
        })
    }
}

impl FromStr for Command {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Ok(match s {
            "train" => Command::Train,
            "dynamics" => Command::Dynamics,
            "correlate" => Command::Correlate,
            "throughput" => Command::Throughput,
            "distsim" => Command::Distsim,
            other => return Err(CliError::Config(format!("unknown command `{other}`"))),
        })
    }
}

/// What a successful command reports back.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub outputs: Vec<String>,
    pub details: serde_json::Value,
    /// One-line human summary for the terminal.
    pub summary: String,
}

struct Out<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl<'a> Out<'a> {
    fn csv<R: Serialize>(&mut self, name: &str, rows: &[R]) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        self.files.push(name.to_string());
        Ok(path)
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }
}

/// Runs `command` and writes `manifest.json` describing the run, whatever its outcome.
pub fn run(command: Command, cfg: &ExperimentConfig, out_dir: &Path) -> CliResult<RunOutput> {
    std::fs::create_dir_all(out_dir)?;
    let started = chrono::Utc::now();
    let mut out = Out {
        dir: out_dir,
        files: Vec::new(),
    };
    let result = match (command, cfg.model.precision) {
        (Command::Train, Precision::F32) => cmd_train::<f32>(cfg, &mut out),
        (Command::Train, Precision::F64) => cmd_train::<f64>(cfg, &mut out),
        (Command::Dynamics, _) => cmd_dynamics(cfg, &mut out),
        (Command::Correlate, Precision::F32) => cmd_correlate::<f32>(cfg, &mut out),
        (Command::Correlate, Precision::F64) => cmd_correlate::<f64>(cfg, &mut out),
        (Command::Throughput, Precision::F32) => cmd_throughput::<f32>(cfg, &mut out),
        (Command::Throughput, Precision::F64) => cmd_throughput::<f64>(cfg, &mut out),
        (Command::Distsim, Precision::F32) => cmd_distsim::<f32>(cfg, &mut out),
        (Command::Distsim, Precision::F64) => cmd_distsim::<f64>(cfg, &mut out),
    };
    let (status, exit_code, details) = match &result {
        Ok(details) => ("ok".to_string(), 0, details.0.clone()),
        Err(e) => (e.to_string(), e.exit_code(), serde_json::Value::Null),
    };
    let mut outputs = out.files.clone();
    outputs.push("manifest.json".into());
    let manifest = RunManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        status,
        exit_code,
        config: cfg.canonical(),
        seeds: Seeds::of(cfg),
        details: details.clone(),
        outputs: outputs.clone(),
        started_at: started.to_rfc3339(),
        finished_at: chrono::Utc::now().to_rfc3339(),
    };
    manifest.write(&out_dir.join("manifest.json"))?;
    let (_, summary) = result?;
    Ok(RunOutput {
        outputs,
        details,
        summary,
    })
}

type CmdResult = CliResult<(serde_json::Value, String)>;

/// Train and validation sets. Synthetic data are generated once and split so that the
/// first `train_per_class` samples of every class train.
pub fn load_data<T: Scalar>(
    cfg: &ExperimentConfig,
) -> CliResult<(LabeledDataset<T>, Option<LabeledDataset<T>>)> {
    let d = &cfg.dataset;
    match d.source {
        DataSource::Synthetic => {
            let all = generate::<T>(&SyntheticParams {
                classes: d.classes,
                per_class: d.train_per_class + d.val_per_class,
                height: d.height,
                width: d.width,
                channels: d.channels,
                noise: d.noise,
                seed: d.seed,
            })?;
            let n_train = d.classes * d.train_per_class;
            let train_idx: Vec<usize> = (0..n_train).collect();
            let val_idx: Vec<usize> = (n_train..all.len()).collect();
            let val = if val_idx.is_empty() {
                None
            } else {
                Some(all.subset(&val_idx)?)
            };
            Ok((all.subset(&train_idx)?, val))
        }
        DataSource::Idx => {
            let train = load_idx::<T>(Path::new(&d.train_images), Path::new(&d.train_labels))?;
            let val = if d.val_images.is_empty() {
                None
            } else {
                Some(load_idx::<T>(
                    Path::new(&d.val_images),
                    Path::new(&d.val_labels),
                )?)
            };
            Ok((train, val))
        }
    }
}

pub fn model_spec(
    cfg: &ExperimentConfig,
    image_shape: [usize; 3],
    classes: usize,
) -> CliResult<ModelSpec> {
    Ok(ModelSpec::from_arch(
        &cfg.model.arch,
        image_shape,
        classes,
        cfg.train.ghost_size,
        cfg.model.dropout,
    )?)
}

fn cmd_train<T: Scalar>(cfg: &ExperimentConfig, out: &mut Out) -> CmdResult {
    let (train_set, val_set) = load_data::<T>(cfg)?;
    let spec = model_spec(cfg, train_set.image_shape(), train_set.classes)?;
    let mode = cfg.train.mode;
    let outcome = train(
        &train_set,
        val_set.as_ref(),
        &spec,
        &cfg.train_config(),
        mode,
    )?;
    let r = &outcome.report;
    out.csv("train.csv", &r.epochs)?;
    if cfg.train.log_steps {
        out.csv("steps.csv", &r.steps)?;
    }
    if cfg.train.save_checkpoint {
        let path = out.path("model.ckpt");
        save_checkpoint(&outcome.model, &path)?;
    }
    let c = &r.config;
    let details = json!({
        "mode": mode.to_string(),
        "batch_size": c.batch_size,
        "replicas": c.replicas,
        "epochs": c.epochs,
        "milestones": c.schedule.milestones(),
        "iterations": r.iterations,
        "final_val_err": r.final_val_err(),
        "peak_activations": r.peak_activations,
    });
    let summary = format!(
        "{mode}: {} iterations, final validation error {}",
        r.iterations,
        r.final_val_err()
            .map_or("n/a".to_string(), |e| format!("{:.4}", e))
    );
    Ok((details, summary))
}

#[derive(Serialize)]
struct SweepRow {
    problem: usize,
    eta: f64,
    lambda_max: f64,
    predicted: Prediction,
    observed: Verdict,
}

#[derive(Serialize)]
struct TightnessRow {
    instance: usize,
    dim: usize,
    lambda_max: f64,
    predicted_boundary: f64,
    observed_boundary: f64,
    rel_error: f64,
}

fn cmd_dynamics(cfg: &ExperimentConfig, out: &mut Out) -> CmdResult {
    let y = &cfg.dynamics;
    let root = RngStream::new(y.seed);
    let opts = SimOptions {
        max_steps: y.max_steps,
        record: false,
    };
    let mut rows = Vec::new();
    for i in 0..y.problems {
        let seed = root.split("problem").split_index(i as u64).seed();
        let p = QuadraticProblem::<f64>::random(
            y.dim,
            y.samples,
            y.batch_size,
            y.rank,
            y.null_dim,
            seed,
        )?;
        let stats = spectral_stats(&p)?;
        let lambda = stats.lambda_max;
        let mut s = root.split("w0").split_index(i as u64);
        let w0 = rng_normal::<f64>(&mut s, [y.dim], 1.0).into_data();
        for j in 0..y.etas {
            let eta = 0.3 * (j + 1) as f64 * 2.0 / lambda;
            let mut s = root
                .split("sim")
                .split_index(i as u64)
                .split_index(j as u64);
            let sim = simulate(&p, &stats, eta, &w0, opts, &mut s)?;
            rows.push(SweepRow {
                problem: i,
                eta,
                lambda_max: lambda,
                predicted: theorem_check(&stats, eta),
                observed: sim.verdict,
            });
        }
    }
    let violations = rows
        .iter()
        .filter(|r| r.predicted == Prediction::Stable && r.observed != Verdict::Converged)
        .count();
    out.csv("verdicts.csv", &rows)?;

    let mut tight = Vec::new();
    for i in 0..y.tightness {
        let mut s = root.split("tight").split_index(i as u64);
        let dim = 1 + s.below(y.dim);
        let lambda = 0.5 + 4.5 * s.next_f64();
        let (p, _) = tightness_construct::<f64>(
            dim,
            y.batch_size,
            y.samples,
            lambda,
            s.split("problem").seed(),
        )?;
        let stats = spectral_stats(&p)?;
        let w0 = rng_normal::<f64>(&mut s, [dim], 1.0).into_data();
        let edge = 2.0 / stats.lambda_max;
        let found = stability_boundary(
            &p,
            &stats,
            &w0,
            0.5 * edge,
            1.5 * edge,
            y.bisect_tol,
            opts,
            s.split("bisect").seed(),
        )?;
        tight.push(TightnessRow {
            instance: i,
            dim,
            lambda_max: stats.lambda_max,
            predicted_boundary: edge,
            observed_boundary: found,
            rel_error: (found - edge).abs() / edge,
        });
    }
    out.csv("tightness.csv", &tight)?;
    let worst = tight.iter().map(|t| t.rel_error).fold(0.0, f64::max);
    let details = json!({
        "points": rows.len(),
        "sufficiency_violations": violations,
        "tightness_instances": tight.len(),
        "tightness_max_rel_error": worst,
    });
    Ok((
        details,
        format!(
            "{} sweep points, {violations} sufficiency violations; tightness max relative error {worst:.2e}",
            rows.len()
        ),
    ))
}

#[derive(Serialize)]
struct StateCorrelationRow {
    state: String,
    category: String,
    pair_index: Option<usize>,
    rho: f64,
}

#[derive(Serialize)]
struct CorrelationSummaryRow {
    state: String,
    category: &'static str,
    median: f64,
    mad: f64,
}

#[derive(Serialize)]
struct StateGradNormRow {
    state: String,
    #[serde(rename = "M")]
    m: usize,
    repeat: usize,
    grad_norm: f64,
}

#[derive(Serialize)]
struct AssumptionRow {
    state: String,
    lhs: f64,
    rhs: f64,
    holds: bool,
}

fn cmd_correlate<T: Scalar>(cfg: &ExperimentConfig, out: &mut Out) -> CmdResult {
    let (train_set, _) = load_data::<T>(cfg)?;
    let spec = model_spec(cfg, train_set.image_shape(), train_set.classes)?;
    let g = &cfg.diagnostics;
    let tcfg = cfg.train_config();
    let mut states: Vec<(String, Model<T>)> = Vec::new();
    if cfg.model.checkpoint.is_empty() {
        for &epochs in &g.states {
            let mut c = tcfg.clone();
            c.epochs = epochs;
            let outcome = train(&train_set, None, &spec, &c, cfg.train.mode)?;
            states.push((format!("epoch{epochs}"), outcome.model));
        }
    } else {
        let model = load_checkpoint::<T>(
            &spec.with_ghost_size(tcfg.ghost_size),
            Path::new(&cfg.model.checkpoint),
        )?;
        states.push(("checkpoint".into(), model));
    }
    let root = RngStream::new(g.seed);
    let (mut rows, mut summary, mut norms, mut checks) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut medians = serde_json::Map::new();
    for (k, (name, model)) in states.iter().enumerate() {
        let s = root.split_index(k as u64);
        let report = correlation_study(
            model,
            &train_set,
            &cfg.augment.transform,
            g.pairs,
            &s.split("pairs"),
            name,
        )?;
        for r in report.rows() {
            rows.push(StateCorrelationRow {
                state: name.clone(),
                category: r.category,
                pair_index: r.pair_index,
                rho: r.rho,
            });
        }
        let mut m = serde_json::Map::new();
        for c in &report.categories {
            summary.push(CorrelationSummaryRow {
                state: name.clone(),
                category: c.category.tag(),
                median: c.median,
                mad: c.mad,
            });
            m.insert(c.category.tag().into(), json!(c.median));
        }
        medians.insert(name.clone(), serde_json::Value::Object(m));
        let trace = grad_norm_study(
            model,
            &train_set,
            &cfg.augment.transform,
            &g.replicas,
            g.batch_size.min(train_set.len()),
            g.repeats,
            forward_mode(&tcfg),
            &s.split("norms"),
        )?;
        norms.extend(trace.rows.into_iter().map(|r| StateGradNormRow {
            state: name.clone(),
            m: r.m,
            repeat: r.repeat,
            grad_norm: r.grad_norm,
        }));
        if g.assumption_samples >= 2 {
            let a = assumption_check(
                model,
                &train_set,
                &cfg.augment.transform,
                g.assumption_samples,
                &s.split("assumption"),
            )?;
            checks.push(AssumptionRow {
                state: name.clone(),
                lhs: a.lhs,
                rhs: a.rhs,
                holds: a.holds,
            });
        }
    }
    out.csv("correlation.csv", &rows)?;
    out.csv("correlation_summary.csv", &summary)?;
    out.csv("grad_norms.csv", &norms)?;
    if !checks.is_empty() {
        out.csv("assumption.csv", &checks)?;
    }
    let text = summary
        .iter()
        .map(|r| format!("{} {}={:.3}", r.state, r.category, r.median))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((
        json!({ "medians": medians }),
        format!("median correlations: {text}"),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThroughputRow {
    pub batch: usize,
    pub med_imgs_per_sec: f64,
    pub std: f64,
}

/// Batch sizes `1, 2, 4, ...` up to `max`, with `max` itself appended when it is not a
/// power of two.
pub fn throughput_batches(max: usize) -> Vec<usize> {
    let mut v: Vec<usize> = std::iter::successors(Some(1usize), |b| Some(b * 2))
        .take_while(|&b| b <= max)
        .collect();
    if v.last() != Some(&max) {
        v.push(max);
    }
    v
}

/// Images per second of a train-mode forward and backward pass for each batch size.
/// Batch normalization uses a single group per batch, and every repetition takes the
/// next `b` images of the training set so caches see fresh data.
pub fn measure_throughput<T: Scalar>(cfg: &ExperimentConfig) -> CliResult<Vec<ThroughputRow>> {
    let (train_set, _) = load_data::<T>(cfg)?;
    let p = &cfg.throughput;
    let arch = if p.arch.is_empty() {
        &cfg.model.arch
    } else {
        &p.arch
    };
    let mut rows = Vec::new();
    for b in throughput_batches(p.max_batch) {
        let spec = ModelSpec::from_arch(
            arch,
            train_set.image_shape(),
            train_set.classes,
            b,
            cfg.model.dropout,
        )?;
        let model = Model::<T>::new(spec, cfg.train.init_seed);
        let dropout = RngStream::new(p.seed).split("dropout");
        let once = |rep: usize| -> CliResult<f64> {
            let idx: Vec<usize> = (0..b).map(|i| (rep * b + i) % train_set.len()).collect();
            let batch = train_set.subset(&idx)?;
            let opts = ForwardOptions::train(dropout.split_index(rep as u64));
            let start = Instant::now();
            let g = model.batch_gradient(&batch.images, &batch.labels, &opts)?;
            let secs = start.elapsed().as_secs_f64().max(1e-9);
            std::hint::black_box(g);
            Ok(b as f64 / secs)
        };
        for rep in 0..p.warmup {
            once(rep)?;
        }
        let rates: Vec<f64> = (0..p.repeats)
            .map(|r| once(p.warmup + r))
            .collect::<CliResult<_>>()?;
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        let std = if rates.len() > 1 {
            (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (rates.len() - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        rows.push(ThroughputRow {
            batch: b,
            med_imgs_per_sec: median(&rates),
            std,
        });
    }
    Ok(rows)
}

fn cmd_throughput<T: Scalar>(cfg: &ExperimentConfig, out: &mut Out) -> CmdResult {
    let rows = measure_throughput::<T>(cfg)?;
    out.csv("throughput.csv", &rows)?;
    let text = rows
        .iter()
        .map(|r| format!("B={} {:.1}/s", r.batch, r.med_imgs_per_sec))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((
        json!({ "batches": rows.len() }),
        format!("images per second: {text}"),
    ))
}

pub fn dist_config(cfg: &ExperimentConfig) -> DistConfig {
    let s = &cfg.distsim;
    DistConfig {
        workers: s.workers,
        replicas: s.replicas,
        local_batch: s.local_batch,
        steps: s.steps,
        seed: s.seed,
        init_seed: cfg.train.init_seed,
        base_lr: cfg.train.lr,
        momentum: cfg.train.momentum,
        weight_decay: cfg.train.weight_decay,
        schedule: cfg.schedule(),
        transform: cfg.augment.transform.clone(),
    }
}

#[derive(Serialize)]
struct SweepTimingRow {
    replicas: usize,
    workers: usize,
    local_batch: usize,
    median_step_seconds: f64,
}

fn cmd_distsim<T: Scalar>(cfg: &ExperimentConfig, out: &mut Out) -> CmdResult {
    let dcfg = dist_config(cfg);
    batchaug_core::distsim::assign_seeds(dcfg.workers, dcfg.replicas, dcfg.seed, dcfg.local_batch)?;
    let (train_set, _) = load_data::<T>(cfg)?;
    let spec = model_spec(cfg, train_set.image_shape(), train_set.classes)?;
    let report = run_equivalence(&train_set, &spec, &dcfg)?;
    out.csv("dist_steps.csv", &report.rows)?;
    let mut timing = Vec::new();
    for &m in &cfg.distsim.sweep_replicas {
        let c = DistConfig {
            replicas: m,
            steps: cfg.distsim.sweep_steps,
            ..dcfg.clone()
        };
        let times = step_times(&train_set, &spec, &c)?;
        timing.push(SweepTimingRow {
            replicas: m,
            workers: c.workers,
            local_batch: c.local_batch,
            median_step_seconds: if times.is_empty() {
                0.0
            } else {
                median(&times)
            },
        });
    }
    if !timing.is_empty() {
        out.csv("step_times.csv", &timing)?;
    }
    let details = json!({
        "bit_exact": report.bit_exact(),
        "first_mismatch": report.first_mismatch,
        "final_checksum": format!("{:016x}", report.final_checksum),
        "reference_checksum": format!("{:016x}", report.reference_checksum),
        "total_loads": report.io.total_loads,
        "unique_loads": report.io.unique_loads,
    });
    if !report.bit_exact() {
        return Err(CliError::Equivalence(format!(
            "distributed parameters first differ from the monolithic run after step {}",
            report.first_mismatch.unwrap_or_default()
        )));
    }
    Ok((
        details,
        format!(
            "bit-exact over {} steps (checksum {:016x}); {} of {} sample loads unique",
            dcfg.steps, report.final_checksum, report.io.unique_loads, report.io.total_loads
        ),
    ))
}
