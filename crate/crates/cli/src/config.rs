//! `[section]` / `key = value` experiment configuration.
//!
//! Every key has a default, unknown sections and keys are rejected, and
//! [`ExperimentConfig::canonical`] renders a normalized document that parses back to the
//! same value.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use batchaug_core::augment::TransformSpec;
use batchaug_core::optim::{ScheduleSpec, TrainConfig, TrainMode};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    /// 1-based line in the source document, when the problem has one.
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(line: Option<usize>, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// A value type that can appear on the right of `key = value`.
pub trait Value: Sized {
    fn parse(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Result<Self, String> {
                s.parse().map_err(|_| format!("expected {}, got `{s}`", stringify!($t)))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(usize, u64);

impl Value for f64 {
    fn parse(s: &str) -> Result<Self, String> {
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(format!("expected a finite number, got `{s}`")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for bool {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            _ => Err(format!("expected true or false, got `{s}`")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for String {
    fn parse(s: &str) -> Result<Self, String> {
        let s = s
            .strip_prefix('"')
            .and_then(|t| t.strip_suffix('"'))
            .unwrap_or(s);
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        format!("\"{self}\"")
    }
}

impl<V: Value> Value for Vec<V> {
    fn parse(s: &str) -> Result<Self, String> {
        let s = s.trim_start_matches('[').trim_end_matches(']').trim();
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|item| V::parse(item.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(V::render).collect::<Vec<_>>().join(",")
    }
}

impl Value for TransformSpec {
    fn parse(s: &str) -> Result<Self, String> {
        let s = s.trim_matches('"');
        TransformSpec::from_str(s).map_err(|e| e.to_string())
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for TrainMode {
    fn parse(s: &str) -> Result<Self, String> {
        TrainMode::from_str(s).map_err(|e| e.to_string())
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Value for Precision {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(format!("precision must be f32 or f64, got `{s}`")),
        }
    }
    fn render(&self) -> String {
        match self {
            Precision::F32 => "f32".into(),
            Precision::F64 => "f64".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Idx,
}

impl Value for DataSource {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "synthetic" => Ok(DataSource::Synthetic),
            "idx" => Ok(DataSource::Idx),
            _ => Err(format!(
                "dataset source must be synthetic or idx, got `{s}`"
            )),
        }
    }
    fn render(&self) -> String {
        match self {
            DataSource::Synthetic => "synthetic".into(),
            DataSource::Idx => "idx".into(),
        }
    }
}

macro_rules! section {
    ($(#[$m:meta])* $name:ident, $tag:literal { $($(#[$fm:meta])* $field:ident : $ty:ty = $default:expr),* $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $($(#[$fm])* pub $field: $ty,)*
        }

        impl Default for $name {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl $name {
            pub const NAME: &'static str = $tag;
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            fn set(&mut self, key: &str, value: &str) -> Option<Result<(), String>> {
                match key {
                    $(stringify!($field) => Some(<$ty as Value>::parse(value).map(|v| self.$field = v)),)*
                    _ => None,
                }
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), Value::render(&self.$field)),)*]
            }
        }
    };
}

section!(
    DatasetSection, "dataset" {
        source: DataSource = DataSource::Synthetic,
        classes: usize = 10,
        train_per_class: usize = 500,
        val_per_class: usize = 100,
        height: usize = 16,
        width: usize = 16,
        channels: usize = 1,
        noise: f64 = 0.2,
        seed: u64 = 1,
        train_images: String = String::new(),
        train_labels: String = String::new(),
        val_images: String = String::new(),
        val_labels: String = String::new(),
    }
);

section!(
    ModelSection, "model" {
        arch: String = "cnn:8,16".into(),
        dropout: f64 = 0.0,
        precision: Precision = Precision::F32,
        /// Optional starting parameters (used by `correlate`).
        checkpoint: String = String::new(),
    }
);

section!(
    AugmentSection, "augment" {
        transform: TransformSpec = TransformSpec::standard(2),
    }
);

section!(
    TrainSection, "train" {
        mode: TrainMode = TrainMode::Ba,
        lr: f64 = 0.05,
        momentum: f64 = 0.9,
        weight_decay: f64 = 5e-4,
        batch_size: usize = 32,
        replicas: usize = 4,
        epochs: usize = 10,
        milestones: Vec<f64> = Vec::new(),
        decay_factor: f64 = 10.0,
        warmup_epochs: f64 = 0.0,
        ghost_size: usize = 32,
        sampler_seed: u64 = 1,
        aug_seed: u64 = 2,
        init_seed: u64 = 3,
        decoupled_bn: bool = false,
        with_replacement: bool = false,
        log_steps: bool = false,
        save_checkpoint: bool = false,
    }
);

section!(
    DiagnosticsSection, "diagnostics" {
        pairs: usize = 100,
        /// Training epochs before each correlation measurement; 0 is the initial state.
        states: Vec<usize> = vec![0],
        replicas: Vec<usize> = vec![1, 2, 4, 8],
        repeats: usize = 50,
        batch_size: usize = 32,
        assumption_samples: usize = 0,
        seed: u64 = 7,
    }
);

section!(
    DynamicsSection, "dynamics" {
        problems: usize = 20,
        dim: usize = 8,
        samples: usize = 32,
        batch_size: usize = 4,
        rank: usize = 2,
        null_dim: usize = 2,
        /// Step sizes per problem, spread over `[0.2, 1.8]·2/λ_max`.
        etas: usize = 5,
        tightness: usize = 5,
        max_steps: usize = 100_000,
        bisect_tol: f64 = 0.002,
        seed: u64 = 11,
    }
);

section!(
    DistsimSection, "distsim" {
        workers: usize = 8,
        replicas: usize = 4,
        local_batch: usize = 16,
        steps: usize = 50,
        seed: u64 = 1,
        /// Replica counts timed at the same worker count and local batch.
        sweep_replicas: Vec<usize> = vec![2, 4],
        sweep_steps: usize = 10,
    }
);

section!(
    ThroughputSection, "throughput" {
        /// Architecture timed; empty means `[model] arch`.
        arch: String = "mlp:512,512".into(),
        max_batch: usize = 32,
        repeats: usize = 5,
        warmup: usize = 1,
        seed: u64 = 5,
    }
);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub augment: AugmentSection,
    pub train: TrainSection,
    pub diagnostics: DiagnosticsSection,
    pub dynamics: DynamicsSection,
    pub distsim: DistsimSection,
    pub throughput: ThroughputSection,
}

pub const SECTIONS: &[&str] = &[
    DatasetSection::NAME,
    ModelSection::NAME,
    AugmentSection::NAME,
    TrainSection::NAME,
    DiagnosticsSection::NAME,
    DynamicsSection::NAME,
    DistsimSection::NAME,
    ThroughputSection::NAME,
];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut lines = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| {
                        ConfigError::at(Some(n), format!("malformed section header `{line}`"))
                    })?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(ConfigError::at(
                        Some(n),
                        format!("unknown section `[{name}]`"),
                    ));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ConfigError::at(Some(n), format!("expected `key = value`, got `{line}`"))
            })?;
            let sec = section
                .as_deref()
                .ok_or_else(|| ConfigError::at(Some(n), "key outside of any [section]"))?;
            let full = format!("{sec}.{}", key.trim());
            if lines.insert(full.clone(), n).is_some() {
                return Err(ConfigError::at(Some(n), format!("duplicate key `{full}`")));
            }
            cfg.set(sec, key.trim(), value.trim())
                .map_err(|m| ConfigError::at(Some(n), m))?;
        }
        cfg.validate()
            .map_err(|(key, m)| ConfigError::at(lines.get(&key).copied(), format!("{key}: {m}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::at(None, format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        let r = match section {
            "dataset" => self.dataset.set(key, value),
            "model" => self.model.set(key, value),
            "augment" => self.augment.set(key, value),
            "train" => self.train.set(key, value),
            "diagnostics" => self.diagnostics.set(key, value),
            "dynamics" => self.dynamics.set(key, value),
            "distsim" => self.distsim.set(key, value),
            "throughput" => self.throughput.set(key, value),
            _ => return Err(format!("unknown section `[{section}]`")),
        };
        match r {
            Some(r) => r.map_err(|m| format!("{section}.{key}: {m}")),
            None => Err(format!("unknown key `{key}` in [{section}]")),
        }
    }

    /// Applies `section.key=value`, then re-validates.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let err = |m: String| ConfigError::at(None, format!("override `{spec}`: {m}"));
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| err("expected section.key=value".into()))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| err("expected section.key=value".into()))?;
        self.set(section, key, value.trim()).map_err(err)?;
        self.validate().map_err(|(k, m)| err(format!("{k}: {m}")))
    }

    /// Sets every run seed to `seed`. The dataset seed stays, so the data do not change.
    pub fn reseed(&mut self, seed: u64) {
        self.train.sampler_seed = seed;
        self.train.aug_seed = seed;
        self.train.init_seed = seed;
        self.diagnostics.seed = seed;
        self.dynamics.seed = seed;
        self.distsim.seed = seed;
        self.throughput.seed = seed;
    }

    pub fn canonical(&self) -> String {
        let sections: [(&str, Vec<(&str, String)>); 8] = [
            (DatasetSection::NAME, self.dataset.entries()),
            (ModelSection::NAME, self.model.entries()),
            (AugmentSection::NAME, self.augment.entries()),
            (TrainSection::NAME, self.train.entries()),
            (DiagnosticsSection::NAME, self.diagnostics.entries()),
            (DynamicsSection::NAME, self.dynamics.entries()),
            (DistsimSection::NAME, self.distsim.entries()),
            (ThroughputSection::NAME, self.throughput.entries()),
        ];
        let mut out = String::new();
        for (i, (name, entries)) in sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!("[{name}]\n"));
            for (k, v) in entries {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    pub fn schedule(&self) -> ScheduleSpec {
        let t = &self.train;
        if t.warmup_epochs > 0.0 {
            ScheduleSpec::WarmupThenStep {
                warmup_epochs: t.warmup_epochs,
                milestones: t.milestones.clone(),
                factor: t.decay_factor,
            }
        } else {
            ScheduleSpec::StepDecay {
                milestones: t.milestones.clone(),
                factor: t.decay_factor,
            }
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            base_lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            replicas: t.replicas,
            epochs: t.epochs,
            schedule: self.schedule(),
            ghost_size: t.ghost_size,
            sampler_seed: t.sampler_seed,
            aug_seed: t.aug_seed,
            init_seed: t.init_seed,
            transform: self.augment.transform.clone(),
            decoupled_bn: t.decoupled_bn,
            with_replacement: t.with_replacement,
            log_steps: t.log_steps,
        }
    }

    /// Range checks; returns the offending `section.key`.
    fn validate(&self) -> Result<(), (String, String)> {
        fn fail(key: &str, m: impl Into<String>) -> Result<(), (String, String)> {
            Err((key.to_string(), m.into()))
        }
        let d = &self.dataset;
        if d.classes == 0 || d.classes > batchaug_core::data::MAX_SYNTHETIC_CLASSES {
            return fail(
                "dataset.classes",
                format!(
                    "must be in 1..={}",
                    batchaug_core::data::MAX_SYNTHETIC_CLASSES
                ),
            );
        }
        for (k, v) in [
            ("dataset.train_per_class", d.train_per_class),
            ("dataset.height", d.height),
            ("dataset.width", d.width),
            ("dataset.channels", d.channels),
        ] {
            if v == 0 {
                return fail(k, "must be positive");
            }
        }
        if d.noise < 0.0 {
            return fail("dataset.noise", "must be non-negative");
        }
        if d.source == DataSource::Idx && (d.train_images.is_empty() || d.train_labels.is_empty()) {
            return fail(
                "dataset.train_images",
                "idx source needs train_images and train_labels",
            );
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return fail("model.dropout", "must be in [0, 1)");
        }
        let t = &self.train;
        if !(t.lr > 0.0) {
            return fail("train.lr", "must be positive");
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return fail("train.momentum", "must be in [0, 1)");
        }
        if t.weight_decay < 0.0 {
            return fail("train.weight_decay", "must be non-negative");
        }
        for (k, v) in [
            ("train.batch_size", t.batch_size),
            ("train.replicas", t.replicas),
            ("train.ghost_size", t.ghost_size),
        ] {
            if v == 0 {
                return fail(k, "must be positive");
            }
        }
        if !(t.decay_factor > 0.0) {
            return fail("train.decay_factor", "must be positive");
        }
        if t.warmup_epochs < 0.0 {
            return fail("train.warmup_epochs", "must be non-negative");
        }
        if t.milestones.windows(2).any(|w| w[0] >= w[1]) || t.milestones.iter().any(|&m| m < 0.0) {
            return fail(
                "train.milestones",
                "must be non-negative and strictly increasing",
            );
        }
        let g = &self.diagnostics;
        if g.pairs == 0 {
            return fail("diagnostics.pairs", "must be positive");
        }
        if g.replicas.is_empty() || g.replicas.contains(&0) {
            return fail(
                "diagnostics.replicas",
                "must be a non-empty list of positive counts",
            );
        }
        if g.batch_size == 0 {
            return fail("diagnostics.batch_size", "must be positive");
        }
        if g.assumption_samples == 1 {
            return fail(
                "diagnostics.assumption_samples",
                "must be 0 (off) or at least 2",
            );
        }
        let y = &self.dynamics;
        for (k, v) in [
            ("dynamics.dim", y.dim),
            ("dynamics.batch_size", y.batch_size),
            ("dynamics.rank", y.rank),
            ("dynamics.max_steps", y.max_steps),
        ] {
            if v == 0 {
                return fail(k, "must be positive");
            }
        }
        if y.samples == 0 || !y.samples.is_multiple_of(y.batch_size) {
            return fail(
                "dynamics.samples",
                "must be a positive multiple of dynamics.batch_size",
            );
        }
        if y.null_dim >= y.dim {
            return fail("dynamics.null_dim", "must be smaller than dynamics.dim");
        }
        if !(y.bisect_tol > 0.0 && y.bisect_tol < 1.0) {
            return fail("dynamics.bisect_tol", "must be in (0, 1)");
        }
        let s = &self.distsim;
        if s.workers == 0 || s.local_batch == 0 || s.replicas == 0 {
            return fail(
                "distsim.workers",
                "workers, replicas and local_batch must be positive",
            );
        }
        if s.sweep_replicas.contains(&0) {
            return fail("distsim.sweep_replicas", "replica counts must be positive");
        }
        let p = &self.throughput;
        if p.max_batch == 0 {
            return fail("throughput.max_batch", "must be positive");
        }
        if p.repeats == 0 {
            return fail("throughput.repeats", "must be positive");
        }
        Ok(())
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}
