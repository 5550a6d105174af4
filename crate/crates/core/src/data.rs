//! Datasets: procedural synthetic images, IDX ingestion and seeded batch sampling.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset<T> {
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub name: String,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(
        images: Tensor<T>,
        labels: Vec<usize>,
        classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        ensure!(
            images.rank() == 4,
            "dataset images must be [N, C, H, W], got {:?}",
            images.shape()
        );
        ensure!(
            images.batch() == labels.len(),
            "{} images but {} labels",
            images.batch(),
            labels.len()
        );
        ensure!(
            labels.iter().all(|&l| l < classes),
            "label out of range for {} classes",
            classes
        );
        Ok(Self {
            images,
            labels,
            classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            name: self.name.clone(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> LabeledDataset<U> {
        LabeledDataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            classes: self.classes,
            name: self.name.clone(),
        }
    }
}

/// Glyphs on a 7×7 canvas, indexed by offsets from the center. Every glyph is mirror
/// symmetric about the vertical axis, so horizontal flips preserve the class.
const GLYPHS: &[fn(i32, i32) -> bool] = &[
    |dx, dy| dx.abs() <= 2 && dy.abs() <= 2,
    |dx, dy| dx.abs().max(dy.abs()) == 3,
    |dx, dy| dx == 0 || dy == 0,
    |dx, dy| dx.abs() == dy.abs(),
    |_, dy| dy.abs() <= 1,
    |dx, _| dx.abs() <= 1,
    |dx, dy| dx.abs() + dy.abs() == 3,
    |dx, dy| dy == -3 || dx == 0,
    |dx, dy| dy == 3 || dx == 0,
    |_, dy| dy.abs() == 2,
    |dx, _| dx.abs() == 2,
    |dx, dy| dx.abs() == 3 || dy == 0,
    |dx, dy| (5..=10).contains(&(dx * dx + dy * dy)),
    |dx, dy| dx.abs() + dy.abs() <= 1,
];

pub const MAX_SYNTHETIC_CLASSES: usize = GLYPHS.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 500,
            height: 16,
            width: 16,
            channels: 1,
            noise: 0.2,
            seed: 1,
        }
    }
}

/// Synthetic dataset with the default noise level.
pub fn gen_synthetic<T: Scalar>(
    classes: usize,
    per_class: usize,
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
) -> Result<LabeledDataset<T>> {
    generate(&SyntheticParams {
        classes,
        per_class,
        height,
        width,
        channels,
        seed,
        ..SyntheticParams::default()
    })
}

/// Class `k` draws glyph `k` at a jittered position near the image center, with random
/// intensity, background level and Gaussian pixel noise. Samples are interleaved by class
/// (`label(i) = i mod K`).
pub fn generate<T: Scalar>(p: &SyntheticParams) -> Result<LabeledDataset<T>> {
    ensure!(
        p.classes > 0 && p.per_class > 0 && p.height > 0 && p.width > 0 && p.channels > 0,
        "synthetic dataset extents must be positive: {:?}",
        p
    );
    ensure!(
        p.classes <= MAX_SYNTHETIC_CLASSES,
        "at most {} synthetic classes, requested {}",
        MAX_SYNTHETIC_CLASSES,
        p.classes
    );
    ensure!(p.noise >= 0.0, "noise must be non-negative");
    let (h, w, c) = (p.height, p.width, p.channels);
    let n = p.classes * p.per_class;
    let scale = (h.min(w) / 14).max(1);
    let glyph = 7 * scale;
    let jitter = (h.min(w).saturating_sub(glyph) / 4) as i64;
    let root = RngStream::new(p.seed).split("synthetic");
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % p.classes;
        let mut s = root.split_index(i as u64);
        let dy = s.below(2 * jitter as usize + 1) as i64 - jitter;
        let dx = s.below(2 * jitter as usize + 1) as i64 - jitter;
        let top = (h as i64 - glyph as i64) / 2 + dy;
        let left = (w as i64 - glyph as i64) / 2 + dx;
        let amplitude = 0.6 + 0.4 * s.next_f64();
        let background = 0.2 * s.next_f64();
        let shape = GLYPHS[label];
        for _ in 0..c {
            let gain = if c == 1 {
                1.0
            } else {
                0.7 + 0.3 * s.next_f64()
            };
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let (gy, gx) = (y - top, x - left);
                    let on = gy >= 0
                        && gx >= 0
                        && gy < glyph as i64
                        && gx < glyph as i64
                        && shape(
                            (gx / scale as i64) as i32 - 3,
                            (gy / scale as i64) as i32 - 3,
                        );
                    let base = if on { amplitude * gain } else { background };
                    let v = (base + p.noise * s.normal()).clamp(0.0, 1.0);
                    data.push(T::lit(v));
                }
            }
        }
        labels.push(label);
    }
    LabeledDataset::new(
        Tensor::new([n, c, h, w], data)?,
        labels,
        p.classes,
        format!("synthetic-k{}-s{}", p.classes, p.seed),
    )
}

const IDX_UBYTE: u8 = 0x08;

fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 {
        return Err(Error::IdxTruncated {
            path: path.into(),
            expected: 4,
            found: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    let ndims = bytes[3] as usize;
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != IDX_UBYTE || ndims == 0 || ndims > 4 {
        return Err(Error::IdxFormat {
            path: path.into(),
            found: magic,
        });
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::IdxTruncated {
            path: path.into(),
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|d| {
            u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().expect("4 bytes")) as usize
        })
        .collect();
    let payload: usize = dims.iter().product();
    if bytes.len() < header + payload {
        return Err(Error::IdxTruncated {
            path: path.into(),
            expected: header + payload,
            found: bytes.len(),
        });
    }
    Ok((dims, bytes[header..header + payload].to_vec()))
}

/// Reads an unsigned-byte IDX image file (`[N, H, W]` or `[N, C, H, W]`) and its label file.
/// Pixels are scaled by 1/255; the class count is `max(label) + 1`.
pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset<T>> {
    let (idims, pixels) = read_idx(images_path)?;
    let (ldims, raw_labels) = read_idx(labels_path)?;
    let shape = match *idims.as_slice() {
        [n, h, w] => [n, 1, h, w],
        [n, c, h, w] => [n, c, h, w],
        _ => {
            return Err(Error::IdxFormat {
                path: images_path.into(),
                found: 0x0800 | idims.len() as u32,
            })
        }
    };
    if ldims.len() != 1 {
        return Err(Error::IdxFormat {
            path: labels_path.into(),
            found: 0x0800 | ldims.len() as u32,
        });
    }
    if ldims[0] != shape[0] {
        return Err(Error::IdxCountMismatch {
            images: shape[0],
            labels: ldims[0],
        });
    }
    let data = pixels.iter().map(|&b| T::lit(b as f64 / 255.0)).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    LabeledDataset::new(Tensor::new(shape, data)?, labels, classes, name)
}

/// Seeded index sampler. Without replacement it walks a fresh permutation per epoch and
/// continues into the next permutation when a batch straddles the epoch boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    stream: RngStream,
    with_replacement: bool,
    population: usize,
    permutation: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl SamplerState {
    pub fn new(population: usize, stream: RngStream, with_replacement: bool) -> Self {
        Self {
            stream,
            with_replacement,
            population,
            permutation: Vec::new(),
            cursor: 0,
            epoch: 0,
        }
    }

    /// Sampler over `population` indices driven by `seed` (isolated from any other stream).
    pub fn from_seed(population: usize, seed: u64, with_replacement: bool) -> Self {
        Self::new(
            population,
            RngStream::new(seed).split("sampler"),
            with_replacement,
        )
    }

    pub fn with_replacement(&self) -> bool {
        self.with_replacement
    }

    /// Completed passes over the permutation (always 0 with replacement).
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn reshuffle(&mut self) {
        self.permutation = (0..self.population).collect();
        self.permutation.shuffle(&mut self.stream);
        self.cursor = 0;
    }

    pub fn next_index(&mut self) -> usize {
        if self.with_replacement {
            return self.stream.below(self.population);
        }
        if self.permutation.is_empty() {
            self.reshuffle();
        } else if self.cursor == self.population {
            self.epoch += 1;
            self.reshuffle();
        }
        let i = self.permutation[self.cursor];
        self.cursor += 1;
        i
    }

    pub fn next_indices(&mut self, count: usize) -> Vec<usize> {
        (0..count).map(|_| self.next_index()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

pub fn sample_batch<T: Scalar>(
    ds: &LabeledDataset<T>,
    sampler: &mut SamplerState,
    batch: usize,
) -> Result<Batch<T>> {
    ensure!(batch >= 1, "batch size must be positive");
    ensure!(
        batch <= ds.len(),
        "batch size {} exceeds dataset size {}",
        batch,
        ds.len()
    );
    ensure!(
        sampler.population == ds.len(),
        "sampler built for {} samples, dataset has {}",
        sampler.population,
        ds.len()
    );
    let indices = sampler.next_indices(batch);
    gather(ds, indices)
}

/// Copies the given samples into a batch.
pub fn gather<T: Scalar>(ds: &LabeledDataset<T>, indices: Vec<usize>) -> Result<Batch<T>> {
    Ok(Batch {
        images: ds.images.select(&indices)?,
        labels: indices.iter().map(|&i| ds.labels[i]).collect(),
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        let a = gen_synthetic::<f32>(2, 1, 8, 8, 1, 7).unwrap();
        let b = gen_synthetic::<f32>(2, 1, 8, 8, 1, 7).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic::<f32>(2, 1, 8, 8, 1, 8).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn synthetic_balanced() {
        let ds = gen_synthetic::<f32>(10, 500, 16, 16, 1, 1).unwrap();
        assert_eq!(ds.len(), 5000);
        for k in 0..10 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == k).count(), 500);
        }
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn synthetic_rejects_bad_extents() {
        assert!(gen_synthetic::<f32>(0, 1, 4, 4, 1, 0).is_err());
        assert!(gen_synthetic::<f32>(2, 1, 0, 4, 1, 0).is_err());
        assert!(gen_synthetic::<f32>(MAX_SYNTHETIC_CLASSES + 1, 1, 4, 4, 1, 0).is_err());
    }

    #[test]
    fn glyphs_are_mirror_symmetric_and_distinct() {
        let raster = |g: &fn(i32, i32) -> bool| -> Vec<bool> {
            (-3..=3)
                .flat_map(|y| (-3..=3).map(move |x| (x, y)))
                .map(|(x, y)| g(x, y))
                .collect()
        };
        for g in GLYPHS {
            for y in -3..=3 {
                for x in -3..=3 {
                    assert_eq!(g(x, y), g(-x, y));
                }
            }
        }
        for i in 0..GLYPHS.len() {
            for j in 0..i {
                assert_ne!(raster(&GLYPHS[i]), raster(&GLYPHS[j]), "glyphs {i} and {j}");
            }
        }
    }

    #[test]
    fn without_replacement_is_permutation() {
        let ds = gen_synthetic::<f32>(2, 2, 4, 4, 1, 0).unwrap();
        let mut s = SamplerState::from_seed(4, 3, false);
        let b = sample_batch(&ds, &mut s, 4).unwrap();
        let mut idx = b.indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3]);
        assert_eq!(
            b.labels,
            b.indices.iter().map(|&i| ds.labels[i]).collect::<Vec<_>>()
        );
    }

    #[test]
    fn every_index_once_per_epoch() {
        let mut s = SamplerState::from_seed(37, 9, false);
        for _ in 0..3 {
            let mut seen = s.next_indices(37);
            seen.sort();
            assert_eq!(seen, (0..37).collect::<Vec<_>>());
        }
        assert_eq!(s.epoch(), 2);
    }

    #[test]
    fn equal_seeds_equal_streams_despite_other_rng_use() {
        let mut a = SamplerState::from_seed(100, 5, false);
        let mut b = SamplerState::from_seed(100, 5, false);
        let mut other = RngStream::new(5);
        let mut sa = Vec::new();
        let mut sb = Vec::new();
        for _ in 0..50 {
            sa.extend(a.next_indices(7));
            let _ = other.next_raw();
            sb.extend(b.next_indices(7));
        }
        assert_eq!(sa, sb);
    }

    #[test]
    fn with_replacement_frequencies_uniform() {
        let mut s = SamplerState::from_seed(10, 1, true);
        let draws = 100_000;
        let mut counts = [0usize; 10];
        for i in s.next_indices(draws) {
            counts[i] += 1;
        }
        let expect = draws as f64 / 10.0;
        let sigma = (draws as f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - expect).abs() < 3.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn batch_larger_than_dataset_rejected() {
        let ds = gen_synthetic::<f32>(2, 2, 4, 4, 1, 0).unwrap();
        let mut s = SamplerState::from_seed(4, 0, false);
        assert!(matches!(
            sample_batch(&ds, &mut s, 5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn batch_is_a_copy() {
        let ds = gen_synthetic::<f32>(2, 2, 4, 4, 1, 0).unwrap();
        let before = ds.clone();
        let mut s = SamplerState::from_seed(4, 0, false);
        let mut b = sample_batch(&ds, &mut s, 2).unwrap();
        b.images.data_mut().iter_mut().for_each(|v| *v = 9.0);
        assert_eq!(ds, before);
    }
}
