//! Gradient correlation and gradient-norm studies on trained or untrained models.

use rayon::prelude::*;
use serde::Serialize;

use crate::augment::{augment_each, TransformSpec};
use crate::data::{gather, sample_batch, LabeledDataset, SamplerState};
use crate::error::{ensure, Error, Result};
use crate::model::{ForwardOptions, Mode, Model};
use crate::optim::{ba_gradient, StepInputs};
use crate::rng::RngStream;
use crate::scalar::{l2_norm, Scalar};

/// Pearson correlation of two equal-length vectors.
pub fn pearson<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    ensure!(
        u.len() == v.len(),
        "length mismatch: {} vs {}",
        u.len(),
        v.len()
    );
    ensure!(u.len() >= 2, "correlation needs at least two coordinates");
    let n = T::from_usize(u.len()).expect("fits");
    let mu = u.iter().copied().sum::<T>() / n;
    let mv = v.iter().copied().sum::<T>() / n;
    let (mut cov, mut su, mut sv) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in u.iter().zip(v) {
        let (da, db) = (a - mu, b - mv);
        cov += da * db;
        su += da * da;
        sv += db * db;
    }
    if su == T::zero() || sv == T::zero() {
        return Err(Error::UndefinedCorrelation(
            "one of the vectors is constant".into(),
        ));
    }
    let r = cov / (su * sv).sqrt();
    Ok(r.max(-T::one()).min(T::one()))
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Median absolute deviation from the median.
pub fn mad(values: &[f64]) -> f64 {
    let m = median(values);
    median(&values.iter().map(|v| (v - m).abs()).collect::<Vec<_>>())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Category {
    /// A sample and an augmented draw of itself.
    #[serde(rename = "x_tx")]
    SameSampleAugmented,
    /// Two distinct samples of the same class.
    #[serde(rename = "x_y")]
    SameClass,
    /// Two samples of different classes.
    #[serde(rename = "z_w")]
    CrossClass,
}

impl Category {
    pub const ALL: [Category; 3] = [
        Category::SameSampleAugmented,
        Category::SameClass,
        Category::CrossClass,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Category::SameSampleAugmented => "x_tx",
            Category::SameClass => "x_y",
            Category::CrossClass => "z_w",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryStats {
    pub category: Category,
    pub rhos: Vec<f64>,
    pub median: f64,
    pub mad: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationReport {
    pub categories: Vec<CategoryStats>,
    pub pairs: usize,
    /// Network state label, e.g. `init`, `partial`, `converged`.
    pub state: String,
}

impl CorrelationReport {
    pub fn get(&self, c: Category) -> &CategoryStats {
        self.categories
            .iter()
            .find(|s| s.category == c)
            .expect("all categories present")
    }

    /// One row per pair, then one summary row per category with the median.
    pub fn rows(&self) -> Vec<CorrelationRow> {
        let mut rows = Vec::new();
        for s in &self.categories {
            for (i, &rho) in s.rhos.iter().enumerate() {
                rows.push(CorrelationRow {
                    category: s.category.tag().to_string(),
                    pair_index: Some(i),
                    rho,
                });
            }
        }
        for s in &self.categories {
            rows.push(CorrelationRow {
                category: format!("{}_median", s.category.tag()),
                pair_index: None,
                rho: s.median,
            });
        }
        rows
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub category: String,
    pub pair_index: Option<usize>,
    pub rho: f64,
}

fn sample_gradient<T: Scalar>(
    model: &Model<T>,
    image: &crate::tensor::Tensor<T>,
    label: usize,
) -> Result<Vec<T>> {
    Ok(model
        .batch_gradient(image, &[label], &ForwardOptions::eval())?
        .grad)
}

fn class_index<T>(ds: &LabeledDataset<T>) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); ds.classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
}

/// Draws the two sample indices of pair `i` in category `c` from its own stream.
fn draw_pair<T: Scalar>(
    ds: &LabeledDataset<T>,
    by_class: &[Vec<usize>],
    c: Category,
    s: &mut RngStream,
) -> Result<(usize, usize)> {
    let n = ds.len();
    match c {
        Category::SameSampleAugmented => {
            let i = s.below(n);
            Ok((i, i))
        }
        Category::SameClass => {
            let eligible: Vec<usize> = (0..by_class.len())
                .filter(|&k| by_class[k].len() >= 2)
                .collect();
            if eligible.is_empty() {
                return Err(Error::Contract("no class has two samples".into()));
            }
            let members = &by_class[eligible[s.below(eligible.len())]];
            let a = s.below(members.len());
            let mut b = s.below(members.len() - 1);
            if b >= a {
                b += 1;
            }
            Ok((members[a], members[b]))
        }
        Category::CrossClass => {
            let present: Vec<usize> = (0..by_class.len())
                .filter(|&k| !by_class[k].is_empty())
                .collect();
            if present.len() < 2 {
                return Err(Error::Contract(
                    "cross-class pairs need two populated classes".into(),
                ));
            }
            let a = s.below(present.len());
            let mut b = s.below(present.len() - 1);
            if b >= a {
                b += 1;
            }
            let (ca, cb) = (&by_class[present[a]], &by_class[present[b]]);
            Ok((ca[s.below(ca.len())], cb[s.below(cb.len())]))
        }
    }
}

/// Median Pearson correlations between flat per-sample gradients (eval mode) for
/// `pairs` pairs per category. Pair `i` of a category uses its own stream, so the
/// result does not depend on evaluation order.
pub fn correlation_study<T: Scalar>(
    model: &Model<T>,
    ds: &LabeledDataset<T>,
    transform: &TransformSpec,
    pairs: usize,
    stream: &RngStream,
    state: &str,
) -> Result<CorrelationReport> {
    ensure!(pairs >= 1, "need at least one pair per category");
    ensure!(!ds.is_empty(), "empty dataset");
    let by_class = class_index(ds);
    let shape = ds.image_shape();
    let mut categories = Vec::new();
    for c in Category::ALL {
        let root = stream.split(c.tag());
        let rhos: Vec<f64> = (0..pairs)
            .into_par_iter()
            .map(|i| -> Result<f64> {
                let mut s = root.split_index(i as u64);
                let (a, b) = draw_pair(ds, &by_class, c, &mut s)?;
                let xa = ds.images.slice_batch(a, a + 1)?;
                let ga = sample_gradient(model, &xa, ds.labels[a])?;
                let xb = if c == Category::SameSampleAugmented {
                    let mut aug = s.split("transform");
                    augment_each(transform, &xa, &mut aug)?
                } else {
                    ds.images.slice_batch(b, b + 1)?
                };
                debug_assert_eq!(&xb.shape()[1..], &shape[..]);
                let gb = sample_gradient(model, &xb, ds.labels[b])?;
                Ok(pearson(&ga, &gb)?.to_f64_lossless())
            })
            .collect::<Result<_>>()?;
        categories.push(CategoryStats {
            category: c,
            median: median(&rhos),
            mad: mad(&rhos),
            rhos,
        });
    }
    Ok(CorrelationReport {
        categories,
        pairs,
        state: state.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradNormRow {
    #[serde(rename = "M")]
    pub m: usize,
    pub repeat: usize,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradNormTrace {
    pub rows: Vec<GradNormRow>,
}

impl GradNormTrace {
    /// Median norm per `M`, in the order the `M` values first appear.
    pub fn medians(&self) -> Vec<(usize, f64)> {
        let mut ms: Vec<usize> = Vec::new();
        for r in &self.rows {
            if !ms.contains(&r.m) {
                ms.push(r.m);
            }
        }
        ms.into_iter()
            .map(|m| {
                let v: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.m == m)
                    .map(|r| r.grad_norm)
                    .collect();
                (m, median(&v))
            })
            .collect()
    }
}

/// L2 norm of the batch-augmented mean gradient at fixed parameters. Repeat `r` draws one
/// `B`-batch and one augmentation root; every `M` reuses both, so larger `M` adds replicas
/// on top of the smaller ones.
#[allow(clippy::too_many_arguments)]
pub fn grad_norm_study<T: Scalar>(
    model: &Model<T>,
    ds: &LabeledDataset<T>,
    transform: &TransformSpec,
    replicas: &[usize],
    batch_size: usize,
    repeats: usize,
    mode: Mode,
    stream: &RngStream,
) -> Result<GradNormTrace> {
    ensure!(!replicas.is_empty(), "replica list must be non-empty");
    ensure!(
        replicas.iter().all(|&m| m >= 1),
        "replica counts must be positive"
    );
    let mut rows = Vec::new();
    for r in 0..repeats {
        let mut sampler =
            SamplerState::new(ds.len(), stream.split("batch").split_index(r as u64), false);
        let batch = sample_batch(ds, &mut sampler, batch_size)?;
        let aug = stream.split("aug").split_index(r as u64);
        let dropout = stream.split("dropout").split_index(r as u64);
        for &m in replicas {
            let inp = StepInputs {
                transform,
                replicas: m,
                chunk: batch_size,
                aug: &aug,
                dropout: &dropout,
                step: 0,
                mode,
            };
            let g = ba_gradient(model, &batch, &inp)?;
            rows.push(GradNormRow {
                m,
                repeat: r,
                grad_norm: l2_norm(&g.grad).to_f64_lossless(),
            });
        }
    }
    Ok(GradNormTrace { rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AssumptionCheck {
    /// Mean correlation between a sample's gradient and that of its augmented draw.
    pub lhs: f64,
    /// Mean correlation between gradients of distinct samples.
    pub rhs: f64,
    pub holds: bool,
}

/// Compares the mean self-augmentation correlation with the mean cross-sample correlation
/// over `samples` drawn samples (all distinct pairs among them on the right-hand side).
pub fn assumption_check<T: Scalar>(
    model: &Model<T>,
    ds: &LabeledDataset<T>,
    transform: &TransformSpec,
    samples: usize,
    stream: &RngStream,
) -> Result<AssumptionCheck> {
    ensure!(
        samples >= 2 && samples <= ds.len(),
        "need 2 ≤ samples ≤ {}",
        ds.len()
    );
    let mut sampler = SamplerState::new(ds.len(), stream.split("samples"), false);
    let batch = gather(ds, sampler.next_indices(samples))?;
    let aug_root = stream.split("transform");
    let pairs: Vec<(Vec<T>, Vec<T>)> = (0..samples)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let x = batch.images.slice_batch(i, i + 1)?;
            let g = sample_gradient(model, &x, batch.labels[i])?;
            let tx = augment_each(transform, &x, &mut aug_root.split_index(i as u64))?;
            let gt = sample_gradient(model, &tx, batch.labels[i])?;
            Ok((g, gt))
        })
        .collect::<Result<_>>()?;
    let mut lhs = 0.0;
    for (g, gt) in &pairs {
        lhs += pearson(g, gt)?.to_f64_lossless();
    }
    lhs /= samples as f64;
    let mut rhs = 0.0;
    let mut count = 0usize;
    for i in 0..samples {
        for j in i + 1..samples {
            rhs += pearson(&pairs[i].0, &pairs[j].0)?.to_f64_lossless();
            count += 1;
        }
    }
    rhs /= count as f64;
    Ok(AssumptionCheck {
        lhs,
        rhs,
        holds: lhs > rhs,
    })
}

/// Unbiased per-coordinate sample variance of a set of gradient vectors.
pub fn coordinate_variance<T: Scalar>(samples: &[Vec<T>]) -> Result<Vec<T>> {
    ensure!(samples.len() >= 2, "variance needs at least two samples");
    let d = samples[0].len();
    ensure!(
        samples.iter().all(|s| s.len() == d),
        "all samples must have the same dimension"
    );
    let n = T::from_usize(samples.len()).expect("fits");
    let mut mean = vec![T::zero(); d];
    for s in samples {
        mean.iter_mut().zip(s).for_each(|(m, &v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![T::zero(); d];
    for s in samples {
        for ((acc, &v), &m) in var.iter_mut().zip(s).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let denom = n - T::one();
    var.iter_mut().for_each(|v| *v /= denom);
    Ok(var)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::gen_synthetic;
    use crate::model::ModelSpec;

    #[test]
    fn pearson_examples() {
        let v = [1.0, 2.0, 4.0, -3.0];
        assert_eq!(pearson(&v, &v).unwrap(), 1.0);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert_eq!(pearson(&v, &neg).unwrap(), -1.0);
        assert_eq!(pearson(&[1.0, 0.0, -1.0], &[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(
            pearson(&[1.0, 1.0], &[0.0, 1.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn median_and_mad() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(mad(&[1.0, 2.0, 3.0, 4.0, 100.0]), 1.0);
    }

    fn setup() -> (Model<f64>, LabeledDataset<f64>) {
        let ds = gen_synthetic::<f64>(4, 6, 8, 8, 1, 3).unwrap();
        let spec = ModelSpec::from_arch("cnn:3", [1, 8, 8], 4, 8, 0.0).unwrap();
        (Model::new(spec, 2), ds)
    }

    #[test]
    fn identity_augmentation_correlates_perfectly() {
        let (model, ds) = setup();
        let r = correlation_study(
            &model,
            &ds,
            &TransformSpec::Identity,
            6,
            &RngStream::new(1),
            "init",
        )
        .unwrap();
        assert!(r
            .get(Category::SameSampleAugmented)
            .rhos
            .iter()
            .all(|&x| x == 1.0));
        assert_eq!(r.rows().len(), 3 * 6 + 3);
        for s in &r.categories {
            assert!((-1.0..=1.0).contains(&s.median));
        }
    }

    #[test]
    fn correlation_study_ignores_thread_count() {
        let (model, ds) = setup();
        let t = TransformSpec::standard(1);
        let a = correlation_study(&model, &ds, &t, 5, &RngStream::new(4), "init").unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap();
        let b = pool
            .install(|| correlation_study(&model, &ds, &t, 5, &RngStream::new(4), "init"))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grad_norm_identity_is_flat_over_replicas() {
        let (model, ds) = setup();
        let trace = grad_norm_study(
            &model,
            &ds,
            &TransformSpec::Identity,
            &[1, 2, 4, 8],
            8,
            2,
            Mode::Train,
            &RngStream::new(5),
        )
        .unwrap();
        for r in 0..2 {
            let norms: Vec<f64> = trace
                .rows
                .iter()
                .filter(|x| x.repeat == r)
                .map(|x| x.grad_norm)
                .collect();
            for n in &norms {
                assert!((n - norms[0]).abs() <= 1e-12 * norms[0]);
            }
        }
        let again = grad_norm_study(
            &model,
            &ds,
            &TransformSpec::Identity,
            &[1],
            8,
            2,
            Mode::Train,
            &RngStream::new(5),
        )
        .unwrap();
        assert_eq!(again.rows[0], trace.rows[0]);
    }

    #[test]
    fn assumption_check_identity_and_random_labels() {
        let (model, ds) = setup();
        let id =
            assumption_check(&model, &ds, &TransformSpec::Identity, 6, &RngStream::new(2)).unwrap();
        assert_eq!(id.lhs, 1.0);
        assert!(id.holds || id.rhs == 1.0);
        let mut shuffled = ds.clone();
        let mut s = RngStream::new(8);
        for l in &mut shuffled.labels {
            *l = s.below(4);
        }
        let r = assumption_check(
            &model,
            &shuffled,
            &TransformSpec::standard(2),
            6,
            &RngStream::new(2),
        )
        .unwrap();
        assert!(r.lhs.is_finite() && r.rhs.is_finite());
    }

    #[test]
    fn coordinate_variance_oracle() {
        let v = coordinate_variance(&[vec![1.0, 0.0], vec![3.0, 0.0], vec![5.0, 0.0]]).unwrap();
        assert_eq!(v, vec![4.0, 0.0]);
        assert!(coordinate_variance(&[vec![1.0]]).is_err());
    }

    proptest! {
        #[test]
        fn pearson_is_symmetric_bounded_and_scale_invariant(
            u in prop::collection::vec(-10.0f64..10.0, 3..20),
            seed in 0u64..1000,
            a in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
            b in -5.0f64..5.0,
        ) {
            let mut s = RngStream::new(seed);
            let v: Vec<f64> = u.iter().map(|_| s.normal()).collect();
            if let (Ok(r), Ok(r2)) = (pearson(&u, &v), pearson(&v, &u)) {
                prop_assert!((r - r2).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&r));
                let scaled: Vec<f64> = u.iter().map(|x| a * x + b).collect();
                let rs = pearson(&scaled, &v).unwrap();
                prop_assert!((rs - a.signum() * r).abs() < 1e-9);
            }
        }
    }
}
