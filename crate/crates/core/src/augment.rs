//! Augmentation family and the batch expansion into `M` augmented replicas.
//!
//! Randomness lives only in [`draw_transform`]; [`apply`] is a pure function of the
//! draw and the image.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TransformSpec {
    Identity,
    /// Zero-pad by `pad` pixels on every side, then crop back to the original size.
    PadCrop {
        pad: usize,
    },
    HFlip {
        p: f64,
    },
    /// Zero a `size`×`size` square centered uniformly on the image grid, clipped at borders.
    Cutout {
        size: usize,
    },
    Compose(Vec<TransformSpec>),
}

impl TransformSpec {
    /// The CIFAR-style default: pad-crop by 4 then a fair horizontal flip.
    pub fn standard(pad: usize) -> Self {
        TransformSpec::Compose(vec![
            TransformSpec::PadCrop { pad },
            TransformSpec::HFlip { p: 0.5 },
        ])
    }

    fn flatten<'a>(&'a self, out: &mut Vec<&'a TransformSpec>) {
        match self {
            TransformSpec::Compose(parts) => parts.iter().for_each(|p| p.flatten(out)),
            TransformSpec::Identity => {}
            other => out.push(other),
        }
    }

    fn validate(&self, shape: [usize; 3]) -> Result<()> {
        let [_, h, w] = shape;
        match *self {
            TransformSpec::Identity | TransformSpec::PadCrop { .. } => Ok(()),
            TransformSpec::HFlip { p } => {
                ensure!(
                    (0.0..=1.0).contains(&p),
                    "flip probability {} outside [0, 1]",
                    p
                );
                Ok(())
            }
            TransformSpec::Cutout { size } => {
                ensure!(
                    size > 0 && size <= h.min(w),
                    "cutout size {} must be in 1..={} for a {}×{} image",
                    size,
                    h.min(w),
                    h,
                    w
                );
                Ok(())
            }
            TransformSpec::Compose(ref parts) => parts.iter().try_for_each(|p| p.validate(shape)),
        }
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut flat = Vec::new();
        self.flatten(&mut flat);
        if flat.is_empty() {
            return f.write_str("identity");
        }
        for (i, t) in flat.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            match t {
                TransformSpec::PadCrop { pad } => write!(f, "padcrop:{pad}")?,
                TransformSpec::HFlip { p } => write!(f, "hflip:{p}")?,
                TransformSpec::Cutout { size } => write!(f, "cutout:{size}")?,
                TransformSpec::Identity | TransformSpec::Compose(_) => unreachable!("flattened"),
            }
        }
        Ok(())
    }
}

impl FromStr for TransformSpec {
    type Err = Error;

    /// Parses a comma separated composition such as `padcrop:4,hflip:0.5,cutout:8`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "identity" || s == "none" {
            return Ok(TransformSpec::Identity);
        }
        let mut parts = Vec::new();
        for item in s.split(',') {
            let item = item.trim();
            let (name, arg) = item.split_once(':').unwrap_or((item, ""));
            let bad = || Error::Config(format!("bad transform argument in `{item}`"));
            let t = match name {
                "identity" | "none" => TransformSpec::Identity,
                "padcrop" => TransformSpec::PadCrop {
                    pad: arg.parse().map_err(|_| bad())?,
                },
                "hflip" => {
                    let p = if arg.is_empty() {
                        0.5
                    } else {
                        arg.parse().map_err(|_| bad())?
                    };
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::Config(format!(
                            "flip probability {p} outside [0, 1]"
                        )));
                    }
                    TransformSpec::HFlip { p }
                }
                "cutout" => {
                    let size: usize = arg.parse().map_err(|_| bad())?;
                    if size == 0 {
                        return Err(Error::Config("cutout size must be positive".into()));
                    }
                    TransformSpec::Cutout { size }
                }
                other => return Err(Error::Config(format!("unknown transform `{other}`"))),
            };
            parts.push(t);
        }
        Ok(match parts.len() {
            1 => parts.pop().expect("one part"),
            _ => TransformSpec::Compose(parts),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DrawStep {
    Crop { pad: usize, dy: usize, dx: usize },
    Flip(bool),
    Cutout { size: usize, cy: usize, cx: usize },
}

/// One concrete transform sampled from a [`TransformSpec`]; steps apply left to right.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformDraw {
    pub image_shape: [usize; 3],
    pub steps: Vec<DrawStep>,
}

impl TransformDraw {
    pub fn is_identity(&self) -> bool {
        self.steps
            .iter()
            .all(|s| matches!(s, DrawStep::Flip(false)))
    }
}

pub fn draw_transform(
    spec: &TransformSpec,
    image_shape: [usize; 3],
    stream: &mut RngStream,
) -> Result<TransformDraw> {
    spec.validate(image_shape)?;
    let [_, h, w] = image_shape;
    let mut flat = Vec::new();
    spec.flatten(&mut flat);
    let steps = flat
        .into_iter()
        .map(|t| match *t {
            TransformSpec::PadCrop { pad } => DrawStep::Crop {
                pad,
                dy: stream.below(2 * pad + 1),
                dx: stream.below(2 * pad + 1),
            },
            TransformSpec::HFlip { p } => DrawStep::Flip(stream.bernoulli(p)),
            TransformSpec::Cutout { size } => DrawStep::Cutout {
                size,
                cy: stream.below(h),
                cx: stream.below(w),
            },
            TransformSpec::Identity | TransformSpec::Compose(_) => unreachable!("flattened"),
        })
        .collect();
    Ok(TransformDraw { image_shape, steps })
}

/// Applies a draw to a `[C, H, W]` image, returning a new image of the same shape.
pub fn apply<T: Scalar>(draw: &TransformDraw, image: &Tensor<T>) -> Result<Tensor<T>> {
    ensure!(
        image.shape() == draw.image_shape,
        "image shape {:?} does not match draw shape {:?}",
        image.shape(),
        draw.image_shape
    );
    let [c, h, w] = draw.image_shape;
    let mut cur = image.data().to_vec();
    for step in &draw.steps {
        match *step {
            DrawStep::Crop { pad, dy, dx } => {
                let mut out = vec![T::zero(); cur.len()];
                for ch in 0..c {
                    for y in 0..h {
                        // source row in the unpadded image
                        let sy = y as i64 + dy as i64 - pad as i64;
                        if sy < 0 || sy >= h as i64 {
                            continue;
                        }
                        for x in 0..w {
                            let sx = x as i64 + dx as i64 - pad as i64;
                            if sx < 0 || sx >= w as i64 {
                                continue;
                            }
                            out[(ch * h + y) * w + x] =
                                cur[(ch * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                cur = out;
            }
            DrawStep::Flip(true) => {
                for row in cur.chunks_mut(w) {
                    row.reverse();
                }
            }
            DrawStep::Flip(false) => {}
            DrawStep::Cutout { size, cy, cx } => {
                let half = (size / 2) as i64;
                let y0 = (cy as i64 - half).max(0) as usize;
                let x0 = (cx as i64 - half).max(0) as usize;
                let y1 = ((cy as i64 - half + size as i64).min(h as i64)) as usize;
                let x1 = ((cx as i64 - half + size as i64).min(w as i64)) as usize;
                for ch in 0..c {
                    for y in y0..y1 {
                        for x in x0..x1 {
                            cur[(ch * h + y) * w + x] = T::zero();
                        }
                    }
                }
            }
        }
    }
    Tensor::new(image.shape().to_vec(), cur)
}

/// Exact number of distinct parameter draws. A flip counts as two outcomes for any `p`.
pub fn enumerate_space(spec: &TransformSpec, image_shape: [usize; 3]) -> Result<u128> {
    spec.validate(image_shape)?;
    let [_, h, w] = image_shape;
    let overflow = || Error::Unsupported(format!("transform space of `{spec}` overflows u128"));
    Ok(match spec {
        TransformSpec::Identity => 1,
        TransformSpec::PadCrop { pad } => {
            let side = 2 * *pad as u128 + 1;
            side * side
        }
        TransformSpec::HFlip { .. } => 2,
        TransformSpec::Cutout { .. } => h as u128 * w as u128,
        TransformSpec::Compose(parts) => {
            let mut total: u128 = 1;
            for p in parts {
                total = total
                    .checked_mul(enumerate_space(p, image_shape)?)
                    .ok_or_else(overflow)?;
            }
            total
        }
    })
}

/// Per-slot streams for a batch expansion. Slot `c·M + j` (chunk `c`, replica `j`) reads
/// `root.split_index(slot).split_index(step)`, which is also exactly the stream a
/// distributed worker with that id derives for the same step.
#[derive(Clone, Debug)]
pub struct ReplicaStreams {
    pub root: RngStream,
    pub step: u64,
}

impl ReplicaStreams {
    pub fn new(root: RngStream, step: u64) -> Self {
        Self { root, step }
    }

    pub fn slot(&self, slot: u64) -> RngStream {
        self.root.split_index(slot).split_index(self.step)
    }
}

/// Draws one transform per image, in order, from a single stream.
pub fn augment_each<T: Scalar>(
    spec: &TransformSpec,
    images: &Tensor<T>,
    stream: &mut RngStream,
) -> Result<Tensor<T>> {
    ensure!(
        images.rank() == 4,
        "expected [B, C, H, W] images, got {:?}",
        images.shape()
    );
    let s = images.shape();
    let shape = [s[1], s[2], s[3]];
    let mut out = Tensor::zeros(s.to_vec());
    for n in 0..images.batch() {
        let draw = draw_transform(spec, shape, stream)?;
        let img = apply(&draw, &images.item(n))?;
        out.row_mut(n).copy_from_slice(img.data());
    }
    Ok(out)
}

/// `M` augmented replicas of every image, replica-major: `out[j·B + n] = T_j(images[n])`.
pub fn expand_batch<T: Scalar>(
    spec: &TransformSpec,
    images: &Tensor<T>,
    labels: &[usize],
    replicas: usize,
    stream: &RngStream,
) -> Result<(Tensor<T>, Vec<usize>)> {
    expand_batch_chunked(
        spec,
        images,
        labels,
        replicas,
        images.batch().max(1),
        &ReplicaStreams::new(stream.clone(), 0),
    )
}

/// [`expand_batch`] with draws organized by sample chunks of size `chunk`: the images of
/// chunk `c` in replica `j` are drawn sequentially from slot `c·M + j`.
pub fn expand_batch_chunked<T: Scalar>(
    spec: &TransformSpec,
    images: &Tensor<T>,
    labels: &[usize],
    replicas: usize,
    chunk: usize,
    streams: &ReplicaStreams,
) -> Result<(Tensor<T>, Vec<usize>)> {
    ensure!(replicas >= 1, "replica count must be at least 1");
    ensure!(
        images.rank() == 4,
        "expected [B, C, H, W] images, got {:?}",
        images.shape()
    );
    let b = images.batch();
    ensure!(
        labels.len() == b,
        "{} labels for {} images",
        labels.len(),
        b
    );
    ensure!(
        chunk >= 1 && b.is_multiple_of(chunk),
        "chunk {} must divide batch {}",
        chunk,
        b
    );
    let mut shape = images.shape().to_vec();
    shape[0] = replicas * b;
    let mut out = Tensor::zeros(shape);
    for c in 0..b / chunk {
        let part = images.slice_batch(c * chunk, (c + 1) * chunk)?;
        for j in 0..replicas {
            let mut s = streams.slot((c * replicas + j) as u64);
            let aug = augment_each(spec, &part, &mut s)?;
            for i in 0..chunk {
                out.row_mut(j * b + c * chunk + i)
                    .copy_from_slice(aug.row(i));
            }
        }
    }
    let tiled = (0..replicas).flat_map(|_| labels.iter().copied()).collect();
    Ok((out, tiled))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn([c, h, w], |i| i as f64 + 1.0)
    }

    #[test]
    fn identity_draw_is_empty() {
        let d =
            draw_transform(&TransformSpec::Identity, [1, 4, 4], &mut RngStream::new(0)).unwrap();
        assert!(d.steps.is_empty());
        let img = ramp(1, 4, 4);
        assert_eq!(apply(&d, &img).unwrap(), img);
    }

    #[test]
    fn padcrop_offsets_in_range() {
        let mut s = RngStream::new(1);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..5000 {
            let d =
                draw_transform(&TransformSpec::PadCrop { pad: 4 }, [3, 32, 32], &mut s).unwrap();
            match d.steps[0] {
                DrawStep::Crop { dy, dx, .. } => {
                    assert!(dy <= 8 && dx <= 8);
                    seen.insert((dy, dx));
                }
                _ => panic!("expected crop"),
            }
        }
        assert_eq!(seen.len(), 81);
    }

    #[test]
    fn draws_deterministic_in_stream_state() {
        let spec: TransformSpec = "padcrop:4,hflip:0.5,cutout:8".parse().unwrap();
        let a = draw_transform(&spec, [3, 32, 32], &mut RngStream::at(9, 17)).unwrap();
        let b = draw_transform(&spec, [3, 32, 32], &mut RngStream::at(9, 17)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cutout_at_corner_clips() {
        let d = TransformDraw {
            image_shape: [1, 4, 4],
            steps: vec![DrawStep::Cutout {
                size: 2,
                cy: 0,
                cx: 0,
            }],
        };
        let out = apply(&d, &Tensor::full([1, 4, 4], 1.0f64)).unwrap();
        let zeros: Vec<usize> = (0..16).filter(|&i| out.data()[i] == 0.0).collect();
        // square spans rows/cols [-1, 1): only (0, 0) is in bounds
        assert_eq!(zeros, vec![0]);
        let d3 = TransformDraw {
            image_shape: [1, 4, 4],
            steps: vec![DrawStep::Cutout {
                size: 3,
                cy: 0,
                cx: 0,
            }],
        };
        let out = apply(&d3, &Tensor::full([1, 4, 4], 1.0f64)).unwrap();
        let zeros: Vec<usize> = (0..16).filter(|&i| out.data()[i] == 0.0).collect();
        assert_eq!(zeros, vec![0, 1, 4, 5]);
    }

    #[test]
    fn flip_is_involution() {
        let d = TransformDraw {
            image_shape: [2, 3, 5],
            steps: vec![DrawStep::Flip(true), DrawStep::Flip(true)],
        };
        let img = ramp(2, 3, 5);
        assert_eq!(apply(&d, &img).unwrap(), img);
        let once = TransformDraw {
            image_shape: [2, 3, 5],
            steps: vec![DrawStep::Flip(true)],
        };
        let f = apply(&once, &img).unwrap();
        assert_eq!(f.data()[0], img.data()[4]);
    }

    #[test]
    fn centered_crop_is_identity() {
        let d = TransformDraw {
            image_shape: [3, 32, 32],
            steps: vec![DrawStep::Crop {
                pad: 4,
                dy: 4,
                dx: 4,
            }],
        };
        let img = ramp(3, 32, 32);
        assert_eq!(apply(&d, &img).unwrap(), img);
    }

    #[test]
    fn crop_shifts_and_zero_fills() {
        let d = TransformDraw {
            image_shape: [1, 3, 3],
            steps: vec![DrawStep::Crop {
                pad: 1,
                dy: 0,
                dx: 2,
            }],
        };
        // output(y, x) = input(y - 1, x + 1)
        let out = apply(&d, &ramp(1, 3, 3)).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0, 2.0, 3.0, 0.0, 5.0, 6.0, 0.0]);
    }

    #[test]
    fn apply_rejects_wrong_shape() {
        let d = draw_transform(
            &TransformSpec::HFlip { p: 1.0 },
            [1, 4, 4],
            &mut RngStream::new(0),
        )
        .unwrap();
        assert!(apply(&d, &ramp(1, 4, 5)).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = RngStream::new(0);
        assert!(draw_transform(&TransformSpec::Cutout { size: 5 }, [1, 4, 4], &mut s).is_err());
        assert!(draw_transform(&TransformSpec::HFlip { p: 1.5 }, [1, 4, 4], &mut s).is_err());
        assert!("cutout:0".parse::<TransformSpec>().is_err());
        assert!("rotate:3".parse::<TransformSpec>().is_err());
    }

    #[test]
    fn space_counts() {
        let shape = [3, 32, 32];
        assert_eq!(
            enumerate_space(&TransformSpec::standard(4), shape).unwrap(),
            162
        );
        assert_eq!(enumerate_space(&TransformSpec::Identity, shape).unwrap(), 1);
        let cut = TransformSpec::Cutout { size: 8 };
        // brute force: every grid center is a distinct draw
        let mut centers = std::collections::HashSet::new();
        for cy in 0..32 {
            for cx in 0..32 {
                centers.insert((cy, cx));
            }
        }
        assert_eq!(enumerate_space(&cut, shape).unwrap(), centers.len() as u128);
        let all: TransformSpec = "padcrop:4,hflip:0.5,cutout:8".parse().unwrap();
        assert_eq!(enumerate_space(&all, shape).unwrap(), 162 * 1024);
    }

    #[test]
    fn spec_text_roundtrip() {
        for s in [
            "identity",
            "padcrop:4",
            "padcrop:4,hflip:0.5",
            "padcrop:2,hflip:0.25,cutout:8",
        ] {
            let t: TransformSpec = s.parse().unwrap();
            assert_eq!(t.to_string(), s);
        }
    }

    #[test]
    fn expand_layout_is_replica_major() {
        let images = Tensor::from_fn([2, 1, 2, 2], |i| i as f64);
        let (out, labels) = expand_batch(
            &TransformSpec::Identity,
            &images,
            &[3, 7],
            3,
            &RngStream::new(0),
        )
        .unwrap();
        assert_eq!(out.shape(), &[6, 1, 2, 2]);
        assert_eq!(labels, vec![3, 7, 3, 7, 3, 7]);
        for j in 0..3 {
            assert_eq!(out.row(2 * j), images.row(0));
            assert_eq!(out.row(2 * j + 1), images.row(1));
        }
    }

    #[test]
    fn expand_m1_matches_single_pass() {
        let ds = crate::data::gen_synthetic::<f64>(2, 3, 8, 8, 1, 0).unwrap();
        let spec = TransformSpec::standard(2);
        let root = RngStream::new(4);
        let (out, _) = expand_batch(&spec, &ds.images, &ds.labels, 1, &root).unwrap();
        let mut s = ReplicaStreams::new(root, 0).slot(0);
        let single = augment_each(&spec, &ds.images, &mut s).unwrap();
        assert_eq!(out, single);
    }

    #[test]
    fn replicas_of_one_sample_rarely_coincide() {
        // P(all 8 draws equal) = 162^-7 per sample; over 200 seeds we must never see it.
        let img = ramp(1, 32, 32);
        let images = Tensor::stack(&[img]).unwrap();
        let spec = TransformSpec::standard(4);
        for seed in 0..200 {
            let (out, _) = expand_batch(&spec, &images, &[0], 8, &RngStream::new(seed)).unwrap();
            let first = out.row(0);
            assert!((1..8).any(|j| out.row(j) != first), "seed {seed}");
        }
    }
}
