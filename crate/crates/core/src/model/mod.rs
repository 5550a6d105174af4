//! Small trainable networks with explicit forward and reverse-mode passes.

mod checkpoint;
mod layers;
mod params;
mod spec;

use rayon::prelude::*;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use params::{layout, GhostBnState, GroupStats, LayerSlots, ModelParams};
pub use spec::{LayerSpec, ModelSpec};

use crate::error::{ensure, Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use layers::{BnGeom, ConvGeom};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics per ghost group, active dropout.
    Train,
    /// Running batch-norm statistics, identity dropout. Samples are independent.
    Eval,
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Dropout masks: row `r` at layer `l` draws from `stream.split_index(l).split_index(row_offset + r)`.
    pub dropout: Option<RngStream>,
    pub row_offset: u64,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            dropout: None,
            row_offset: 0,
        }
    }

    pub fn train(dropout: RngStream) -> Self {
        Self {
            mode: Mode::Train,
            dropout: Some(dropout),
            row_offset: 0,
        }
    }

    /// Train mode for models without active dropout.
    pub fn train_deterministic() -> Self {
        Self {
            mode: Mode::Train,
            dropout: None,
            row_offset: 0,
        }
    }

    pub fn with_row_offset(mut self, offset: u64) -> Self {
        self.row_offset = offset;
        self
    }
}

#[derive(Clone, Debug)]
enum LayerCache<T> {
    Linear {
        input: Vec<T>,
    },
    Conv {
        input: Vec<T>,
    },
    Pool,
    Relu {
        output: Vec<T>,
    },
    Bn {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        group: Option<usize>,
    },
    Dropout {
        mask: Option<Vec<T>>,
    },
    Flatten,
}

impl<T> LayerCache<T> {
    fn values(&self) -> usize {
        match self {
            LayerCache::Linear { input } => input.len(),
            LayerCache::Conv { input } => input.len(),
            LayerCache::Relu { output } => output.len(),
            LayerCache::Bn { xhat, inv_std, .. } => xhat.len() + inv_std.len(),
            LayerCache::Dropout { mask } => mask.as_ref().map_or(0, Vec::len),
            LayerCache::Pool | LayerCache::Flatten => 0,
        }
    }
}

/// Everything backward needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    generation: u64,
    batch: usize,
    mode: Mode,
    layers: Vec<LayerCache<T>>,
    /// Per batch-norm layer (by layer index): statistics of each ghost group, train mode only.
    pub bn_stats: Vec<(usize, Vec<GroupStats<T>>)>,
}

impl<T> ForwardCache<T> {
    /// Number of scalar activations held for the backward pass.
    pub fn activation_count(&self) -> usize {
        self.layers.iter().map(LayerCache::values).sum()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Network definition, trainable parameters and batch-norm running state.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub params: ModelParams<T>,
    /// Running statistics, `Some` exactly at batch-norm layers.
    pub bn: Vec<Option<GhostBnState<T>>>,
}

/// Mean loss, top-1 correct count and flat gradient of one batch.
#[derive(Clone, Debug)]
pub struct BatchGradient<T> {
    pub loss: T,
    pub correct: usize,
    pub grad: Vec<T>,
    pub bn_stats: Vec<(usize, Vec<GroupStats<T>>)>,
    pub activations: usize,
}

/// Mean softmax cross-entropy over rows of `logits` and its gradient w.r.t. the logits.
/// Returns `(loss, dlogits, correct)`.
pub fn loss_softmax_xent<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>, usize)> {
    ensure!(
        logits.rank() == 2,
        "logits must be [N, K], got {:?}",
        logits.shape()
    );
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    ensure!(labels.len() == n, "{} labels for {} rows", labels.len(), n);
    ensure!(n > 0, "loss over an empty batch");
    ensure!(
        labels.iter().all(|&l| l < k),
        "label out of range for {} classes",
        k
    );
    let inv_n = T::one() / T::from_usize(n).expect("batch fits");
    let mut total = T::zero();
    let mut correct = 0;
    let mut grad = vec![T::zero(); n * k];
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let mut best = 0;
        let mut max = row[0];
        for (j, &z) in row.iter().enumerate() {
            if z > max {
                max = z;
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
        let mut denom = T::zero();
        for &z in row {
            denom += (z - max).exp();
        }
        let lse = max + denom.ln();
        total += lse - row[label];
        let g = &mut grad[i * k..(i + 1) * k];
        for (j, gv) in g.iter_mut().enumerate() {
            let p = (row[j] - max).exp() / denom;
            let target = if j == label { T::one() } else { T::zero() };
            *gv = (p - target) * inv_n;
        }
    }
    Ok((total * inv_n, Tensor::new([n, k], grad)?, correct))
}

impl<T: Scalar> Model<T> {
    pub fn new(spec: ModelSpec, seed: u64) -> Self {
        let params = ModelParams::init(&spec, seed);
        Self::with_params(spec, params)
    }

    pub fn with_params(spec: ModelSpec, params: ModelParams<T>) -> Self {
        let bn = spec
            .layers
            .iter()
            .map(|l| match *l {
                LayerSpec::GhostBatchNorm { features, .. } => Some(GhostBnState::new(features)),
                _ => None,
            })
            .collect();
        Self { spec, params, bn }
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        opts: &ForwardOptions,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let shapes = self.spec.shapes()?;
        ensure!(
            x.rank() >= 1 && &x.shape()[1..] == shapes[0].as_slice(),
            "input {:?} does not match model input {:?}",
            x.shape(),
            shapes[0]
        );
        let n = x.batch();
        ensure!(n > 0, "forward on an empty batch");
        let mut act = x.data().to_vec();
        let mut caches = Vec::with_capacity(self.spec.layers.len());
        let mut bn_stats = Vec::new();
        for (li, layer) in self.spec.layers.iter().enumerate() {
            let in_shape = &shapes[li];
            let cache = match *layer {
                LayerSpec::Linear { input, output } => {
                    let y = layers::linear_forward(
                        &act,
                        n,
                        input,
                        output,
                        self.params.weight(li),
                        self.params.bias(li),
                    );
                    let input = std::mem::replace(&mut act, y);
                    LayerCache::Linear { input }
                }
                LayerSpec::Conv2d {
                    input,
                    output,
                    kernel,
                } => {
                    let g = ConvGeom {
                        n,
                        c_in: input,
                        c_out: output,
                        h: in_shape[1],
                        w: in_shape[2],
                        k: kernel,
                    };
                    let y = layers::conv_forward(
                        &act,
                        &g,
                        self.params.weight(li),
                        self.params.bias(li),
                    );
                    LayerCache::Conv {
                        input: std::mem::replace(&mut act, y),
                    }
                }
                LayerSpec::AvgPool { size } => {
                    act =
                        layers::pool_forward(&act, n, in_shape[0], in_shape[1], in_shape[2], size);
                    LayerCache::Pool
                }
                LayerSpec::ReLU => {
                    // Select rather than branch so the loop vectorizes; NaN passes through.
                    act.iter_mut()
                        .for_each(|v| *v = if *v < T::zero() { T::zero() } else { *v });
                    LayerCache::Relu {
                        output: act.clone(),
                    }
                }
                LayerSpec::GhostBatchNorm {
                    features,
                    ghost_size,
                } => {
                    let geo = BnGeom {
                        n,
                        f: features,
                        spatial: in_shape[1..].iter().product(),
                    };
                    let state = self.bn[li].as_ref().expect("bn state at bn layer");
                    let (gamma, beta) = (self.params.weight(li), self.params.bias(li));
                    match opts.mode {
                        Mode::Train => {
                            if !n.is_multiple_of(ghost_size) {
                                return Err(Error::Config(format!(
                                    "ghost batch size {ghost_size} does not divide batch of {n}"
                                )));
                            }
                            let out = layers::bn_train_forward(
                                &mut act, geo, ghost_size, gamma, beta, state.eps,
                            );
                            bn_stats.push((li, out.stats));
                            LayerCache::Bn {
                                xhat: out.xhat,
                                inv_std: out.inv_std,
                                group: Some(ghost_size),
                            }
                        }
                        Mode::Eval => {
                            let out = layers::bn_eval_forward(
                                &mut act,
                                geo,
                                &state.mean,
                                &state.var,
                                gamma,
                                beta,
                                state.eps,
                            );
                            LayerCache::Bn {
                                xhat: out.xhat,
                                inv_std: out.inv_std,
                                group: None,
                            }
                        }
                    }
                }
                LayerSpec::Dropout { p } => {
                    if opts.mode == Mode::Eval || p == 0.0 {
                        LayerCache::Dropout { mask: None }
                    } else {
                        let root = opts
                            .dropout
                            .as_ref()
                            .ok_or_else(|| {
                                Error::Contract("train-mode dropout needs a mask stream".into())
                            })?
                            .split_index(li as u64);
                        let keep = 1.0 - p;
                        let scale = T::lit(1.0 / keep);
                        let width = act.len() / n;
                        let mut mask = Vec::with_capacity(act.len());
                        for r in 0..n {
                            let mut s = root.split_index(opts.row_offset + r as u64);
                            for _ in 0..width {
                                mask.push(if s.bernoulli(keep) { scale } else { T::zero() });
                            }
                        }
                        for (a, &m) in act.iter_mut().zip(&mask) {
                            *a *= m;
                        }
                        LayerCache::Dropout { mask: Some(mask) }
                    }
                }
                LayerSpec::Flatten => LayerCache::Flatten,
            };
            caches.push(cache);
        }
        let logits = Tensor::new([n, self.spec.classes], act)?;
        Ok((
            logits,
            ForwardCache {
                generation: self.params.generation(),
                batch: n,
                mode: opts.mode,
                layers: caches,
                bn_stats,
            },
        ))
    }

    /// Reverse-mode gradient of the loss whose logit gradient is `dlogits`, in flat-view layout.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &Tensor<T>) -> Result<Vec<T>> {
        if cache.generation != self.params.generation() {
            return Err(Error::StaleCache {
                cache: cache.generation,
                params: self.params.generation(),
            });
        }
        ensure!(
            cache.layers.len() == self.spec.layers.len(),
            "cache was produced by a different model"
        );
        let n = cache.batch;
        ensure!(
            dlogits.shape() == [n, self.spec.classes],
            "dlogits {:?} does not match batch {} × {} classes",
            dlogits.shape(),
            n,
            self.spec.classes
        );
        let shapes = self.spec.shapes()?;
        let mut grad = vec![T::zero(); self.params.dim()];
        let mut delta = dlogits.data().to_vec();
        for (li, layer) in self.spec.layers.iter().enumerate().rev() {
            let in_shape = &shapes[li];
            let slots = &self.params.slots()[li];
            match (layer, &cache.layers[li]) {
                (&LayerSpec::Linear { input, output }, LayerCache::Linear { input: x }) => {
                    let (wr, br) = (
                        slots.weight.clone().expect("w"),
                        slots.bias.clone().expect("b"),
                    );
                    let (lo, hi) = grad.split_at_mut(br.start);
                    delta = layers::linear_backward(
                        x,
                        &delta,
                        n,
                        input,
                        output,
                        self.params.weight(li),
                        &mut lo[wr],
                        &mut hi[..br.len()],
                    );
                }
                (
                    &LayerSpec::Conv2d {
                        input,
                        output,
                        kernel,
                    },
                    LayerCache::Conv { input: x },
                ) => {
                    let g = ConvGeom {
                        n,
                        c_in: input,
                        c_out: output,
                        h: in_shape[1],
                        w: in_shape[2],
                        k: kernel,
                    };
                    let (wr, br) = (
                        slots.weight.clone().expect("w"),
                        slots.bias.clone().expect("b"),
                    );
                    let (lo, hi) = grad.split_at_mut(br.start);
                    delta = layers::conv_backward(
                        x,
                        &delta,
                        &g,
                        self.params.weight(li),
                        &mut lo[wr],
                        &mut hi[..br.len()],
                    );
                }
                (&LayerSpec::AvgPool { size }, LayerCache::Pool) => {
                    delta = layers::pool_backward(
                        &delta,
                        n,
                        in_shape[0],
                        in_shape[1],
                        in_shape[2],
                        size,
                    );
                }
                (LayerSpec::ReLU, LayerCache::Relu { output }) => {
                    for (d, &y) in delta.iter_mut().zip(output) {
                        *d = if y > T::zero() { *d } else { T::zero() };
                    }
                }
                (
                    &LayerSpec::GhostBatchNorm { features, .. },
                    LayerCache::Bn {
                        xhat,
                        inv_std,
                        group,
                    },
                ) => {
                    let geo = BnGeom {
                        n,
                        f: features,
                        spatial: in_shape[1..].iter().product(),
                    };
                    let (wr, br) = (
                        slots.weight.clone().expect("g"),
                        slots.bias.clone().expect("b"),
                    );
                    let (lo, hi) = grad.split_at_mut(br.start);
                    delta = layers::bn_backward(
                        &delta,
                        xhat,
                        inv_std,
                        geo,
                        *group,
                        self.params.weight(li),
                        &mut lo[wr],
                        &mut hi[..br.len()],
                    );
                }
                (LayerSpec::Dropout { .. }, LayerCache::Dropout { mask }) => {
                    if let Some(mask) = mask {
                        for (d, &m) in delta.iter_mut().zip(mask) {
                            *d *= m;
                        }
                    }
                }
                (LayerSpec::Flatten, LayerCache::Flatten) => {}
                _ => {
                    return Err(Error::Contract(format!(
                        "cache entry {li} does not match layer {layer:?}"
                    )))
                }
            }
        }
        Ok(grad)
    }

    /// Forward, loss and backward on one batch.
    pub fn batch_gradient(
        &self,
        x: &Tensor<T>,
        labels: &[usize],
        opts: &ForwardOptions,
    ) -> Result<BatchGradient<T>> {
        let (logits, cache) = self.forward(x, opts)?;
        let (loss, dlogits, correct) = loss_softmax_xent(&logits, labels)?;
        let grad = self.backward(&cache, &dlogits)?;
        Ok(BatchGradient {
            loss,
            correct,
            grad,
            activations: cache.activation_count(),
            bn_stats: cache.bn_stats,
        })
    }

    /// Folds train-mode ghost-group statistics into the running batch-norm state.
    pub fn absorb_bn_stats(&mut self, stats: &[&[(usize, Vec<GroupStats<T>>)]]) {
        for (li, state) in self.bn.iter_mut().enumerate() {
            let Some(state) = state else { continue };
            let groups: Vec<GroupStats<T>> = stats
                .iter()
                .flat_map(|s| s.iter())
                .filter(|(l, _)| *l == li)
                .flat_map(|(_, g)| g.iter().cloned())
                .collect();
            state.absorb(&groups);
        }
    }

    /// Eval-mode mean loss and top-1 error over a dataset, in chunks of `chunk` samples.
    pub fn evaluate(&self, images: &Tensor<T>, labels: &[usize], chunk: usize) -> Result<(T, f64)> {
        let n = images.batch();
        ensure!(
            n > 0 && labels.len() == n,
            "evaluation needs matching non-empty images and labels"
        );
        let mut loss_sum = T::zero();
        let mut correct = 0;
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let part = images.slice_batch(start, end)?;
            let (logits, _) = self.forward(&part, &ForwardOptions::eval())?;
            let (loss, _, c) = loss_softmax_xent(&logits, &labels[start..end])?;
            loss_sum += loss * T::from_usize(end - start).expect("fits");
            correct += c;
            start = end;
        }
        Ok((
            loss_sum / T::from_usize(n).expect("fits"),
            1.0 - correct as f64 / n as f64,
        ))
    }

    /// One gradient per sample, each from an independent eval-mode pass (running batch-norm
    /// statistics, no dropout) so that samples do not interact. Results are in sample order.
    pub fn per_sample_grads(&self, images: &Tensor<T>, labels: &[usize]) -> Result<Vec<Vec<T>>> {
        ensure!(
            images.batch() == labels.len(),
            "{} labels for {} images",
            labels.len(),
            images.batch()
        );
        (0..images.batch())
            .into_par_iter()
            .map(|i| {
                let x = images.slice_batch(i, i + 1)?;
                Ok(self
                    .batch_gradient(&x, &labels[i..i + 1], &ForwardOptions::eval())?
                    .grad)
            })
            .collect()
    }

    /// Forward over `M` replica-major copies of `batch`, every replica with its own dropout masks.
    /// In eval mode this is a single plain forward of `batch`.
    pub fn dropout_replicas(
        &self,
        batch: &Tensor<T>,
        replicas: usize,
        stream: &RngStream,
        mode: Mode,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        ensure!(replicas >= 1, "replica count must be at least 1");
        if mode == Mode::Eval {
            return self.forward(batch, &ForwardOptions::eval());
        }
        ensure!(
            self.spec
                .layers
                .iter()
                .any(|l| matches!(l, LayerSpec::Dropout { .. })),
            "dropout replicas need a dropout layer"
        );
        let copies: Vec<Tensor<T>> = (0..replicas).map(|_| batch.clone()).collect();
        let x = Tensor::concat(&copies)?;
        self.forward(&x, &ForwardOptions::train(stream.clone()))
    }
}

#[cfg(test)]
mod tests;
