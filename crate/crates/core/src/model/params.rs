use std::ops::Range;

use crate::error::{ensure, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::spec::{LayerSpec, ModelSpec};

/// Where one layer's trainable values live inside the flat parameter vector.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayerSlots {
    /// Weight (or batch-norm scale γ).
    pub weight: Option<Range<usize>>,
    /// Bias (or batch-norm shift β).
    pub bias: Option<Range<usize>>,
    /// Whether weight decay applies; false for batch-norm layers.
    pub decay: bool,
}

/// Flat parameter layout: layers in order, each contributing weight then bias.
pub fn layout(spec: &ModelSpec) -> Vec<LayerSlots> {
    let mut offset = 0;
    let mut take = |len: usize| {
        let r = offset..offset + len;
        offset += len;
        Some(r)
    };
    spec.layers
        .iter()
        .map(|l| match *l {
            LayerSpec::Linear { input, output } => LayerSlots {
                weight: take(input * output),
                bias: take(output),
                decay: true,
            },
            LayerSpec::Conv2d {
                input,
                output,
                kernel,
            } => LayerSlots {
                weight: take(output * input * kernel * kernel),
                bias: take(output),
                decay: true,
            },
            LayerSpec::GhostBatchNorm { features, .. } => LayerSlots {
                weight: take(features),
                bias: take(features),
                decay: false,
            },
            _ => LayerSlots::default(),
        })
        .collect()
}

/// All trainable values of a model as one vector of dimension `d` (the flat view).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    flat: Vec<T>,
    slots: Vec<LayerSlots>,
    generation: u64,
}

impl<T: Scalar> ModelParams<T> {
    /// He-normal weights, zero biases, unit batch-norm scale and zero shift.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let slots = layout(spec);
        let d = spec.param_count();
        let mut flat = vec![T::zero(); d];
        let root = RngStream::new(seed).split("init");
        for (i, (layer, slot)) in spec.layers.iter().zip(&slots).enumerate() {
            let mut s = root.split_index(i as u64);
            match *layer {
                LayerSpec::Linear { input: fan_in, .. } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    for v in &mut flat[slot.weight.clone().expect("linear weight")] {
                        *v = T::lit(std * s.normal());
                    }
                }
                LayerSpec::Conv2d { input, kernel, .. } => {
                    let std = (2.0 / (input * kernel * kernel) as f64).sqrt();
                    for v in &mut flat[slot.weight.clone().expect("conv weight")] {
                        *v = T::lit(std * s.normal());
                    }
                }
                LayerSpec::GhostBatchNorm { .. } => {
                    for v in &mut flat[slot.weight.clone().expect("bn scale")] {
                        *v = T::one();
                    }
                }
                _ => {}
            }
        }
        Self {
            flat,
            slots,
            generation: 0,
        }
    }

    pub fn from_flat(spec: &ModelSpec, flat: Vec<T>) -> Result<Self> {
        ensure!(
            flat.len() == spec.param_count(),
            "flat vector has {} values, model needs {}",
            flat.len(),
            spec.param_count()
        );
        Ok(Self {
            flat,
            slots: layout(spec),
            generation: 0,
        })
    }

    /// Per-layer (weight, bias) tensors, shaped as the layer uses them.
    pub fn tensors(&self, spec: &ModelSpec) -> Vec<Option<(Tensor<T>, Tensor<T>)>> {
        spec.layers
            .iter()
            .zip(&self.slots)
            .map(|(l, s)| {
                let (w, b) = (s.weight.clone()?, s.bias.clone()?);
                let wshape = match *l {
                    LayerSpec::Linear { input, output } => vec![input, output],
                    LayerSpec::Conv2d {
                        input,
                        output,
                        kernel,
                    } => vec![output, input, kernel, kernel],
                    LayerSpec::GhostBatchNorm { features, .. } => vec![features],
                    _ => unreachable!("only parameterized layers have slots"),
                };
                let bshape = vec![b.len()];
                Some((
                    Tensor::new(wshape, self.flat[w].to_vec()).expect("layout matches"),
                    Tensor::new(bshape, self.flat[b].to_vec()).expect("layout matches"),
                ))
            })
            .collect()
    }

    /// Inverse of [`ModelParams::tensors`].
    pub fn from_tensors(
        spec: &ModelSpec,
        tensors: &[Option<(Tensor<T>, Tensor<T>)>],
    ) -> Result<Self> {
        ensure!(
            tensors.len() == spec.layers.len(),
            "one entry per layer expected"
        );
        let mut flat = Vec::with_capacity(spec.param_count());
        for t in tensors.iter().flatten() {
            flat.extend_from_slice(t.0.data());
            flat.extend_from_slice(t.1.data());
        }
        Self::from_flat(spec, flat)
    }

    pub fn dim(&self) -> usize {
        self.flat.len()
    }

    pub fn flat(&self) -> &[T] {
        &self.flat
    }

    /// Mutable flat view; bumps the generation so older activation caches become stale.
    pub fn flat_mut(&mut self) -> &mut [T] {
        self.generation += 1;
        &mut self.flat
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn slots(&self) -> &[LayerSlots] {
        &self.slots
    }

    pub(crate) fn weight(&self, layer: usize) -> &[T] {
        &self.flat[self.slots[layer]
            .weight
            .clone()
            .expect("layer has a weight")]
    }

    pub(crate) fn bias(&self, layer: usize) -> &[T] {
        &self.flat[self.slots[layer].bias.clone().expect("layer has a bias")]
    }

    /// Per-coordinate flag: true where weight decay applies.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.flat.len()];
        for s in &self.slots {
            if !s.decay {
                continue;
            }
            for r in [&s.weight, &s.bias].into_iter().flatten() {
                mask[r.clone()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }
}

/// Running statistics of one ghost-batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GhostBnState<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> GhostBnState<T> {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![T::zero(); features],
            var: vec![T::one(); features],
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
        }
    }

    /// Exponential moving average toward the mean of the per-ghost-group statistics.
    pub fn absorb(&mut self, groups: &[GroupStats<T>]) {
        if groups.is_empty() {
            return;
        }
        let count = T::from_usize(groups.len()).expect("count fits");
        let one = T::one();
        for f in 0..self.mean.len() {
            let mut m = T::zero();
            let mut v = T::zero();
            for g in groups {
                m += g.mean[f];
                v += g.var[f];
            }
            m /= count;
            v /= count;
            self.mean[f] = (one - self.momentum) * self.mean[f] + self.momentum * m;
            self.var[f] = (one - self.momentum) * self.var[f] + self.momentum * v;
        }
    }
}

/// Mean and (biased) variance of one ghost group, per feature.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}
