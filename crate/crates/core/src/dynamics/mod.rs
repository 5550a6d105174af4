//! Linearized SGD on per-sample quadratic losses: spectra, simulation, the stability
//! threshold `λ_max < 2/η` with its tight instances, and moment dynamics.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{ensure, Result};
use crate::linalg::{mat_vec, outer_sum, power_iteration, quad_form, symmetric_eigen};
use crate::rng::RngStream;
use crate::scalar::{dot, l2_norm, Scalar};
use crate::tensor::{matmul, matmul_nt, Tensor};

/// Largest dimension handled by a dense eigendecomposition; beyond it, power iteration.
const DENSE_LIMIT: usize = 64;
/// Relative eigenvalue threshold below which a direction counts as null.
pub const NULL_TOL: f64 = 1e-10;
pub const DIVERGE_FACTOR: f64 = 1e8;
pub const CONVERGE_FACTOR: f64 = 1e-8;
pub const DEFAULT_MAX_STEPS: usize = 100_000;

/// Per-sample Hessians `H_n = G_n G_nᵀ` and a fixed partition into batches of `B`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticProblem<T> {
    dim: usize,
    batch_size: usize,
    /// One `[d, r]` factor per sample.
    factors: Vec<Tensor<T>>,
    /// `partition[k]` lists the samples of batch `k`.
    partition: Vec<Vec<usize>>,
}

impl<T: Scalar> QuadraticProblem<T> {
    pub fn new(dim: usize, factors: Vec<Tensor<T>>, partition: Vec<Vec<usize>>) -> Result<Self> {
        ensure!(dim >= 1, "dimension must be positive");
        ensure!(!partition.is_empty(), "at least one batch required");
        let b = partition[0].len();
        ensure!(b >= 1, "batches must be non-empty");
        ensure!(
            partition.iter().all(|k| k.len() == b),
            "all batches must have size {}",
            b
        );
        for (i, g) in factors.iter().enumerate() {
            ensure!(
                g.rank() == 2 && g.shape()[0] == dim,
                "factor {} has shape {:?}, expected [{}, r]",
                i,
                g.shape(),
                dim
            );
        }
        let mut seen = vec![false; factors.len()];
        for &n in partition.iter().flatten() {
            ensure!(
                n < factors.len() && !seen[n],
                "partition must cover the samples disjointly"
            );
            seen[n] = true;
        }
        ensure!(seen.iter().all(|&s| s), "partition must cover every sample");
        Ok(Self {
            dim,
            batch_size: b,
            factors,
            partition,
        })
    }

    /// Contiguous partition: batch `k` holds samples `kB .. (k+1)B`.
    pub fn contiguous(dim: usize, batch_size: usize, factors: Vec<Tensor<T>>) -> Result<Self> {
        let n = factors.len();
        ensure!(
            batch_size >= 1 && n.is_multiple_of(batch_size),
            "batch size {} must divide N = {}",
            batch_size,
            n
        );
        let partition = (0..n / batch_size)
            .map(|k| (k * batch_size..(k + 1) * batch_size).collect())
            .collect();
        Self::new(dim, factors, partition)
    }

    /// Gaussian factors of rank `rank` confined to a random `dim − null_dim` dimensional subspace,
    /// so the problem has (at least) a `null_dim` dimensional common null space.
    pub fn random(
        dim: usize,
        samples: usize,
        batch_size: usize,
        rank: usize,
        null_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        ensure!(
            null_dim < dim,
            "null space must leave at least one direction"
        );
        ensure!(rank >= 1, "rank must be positive");
        let mut s = RngStream::new(seed).split("quadratic");
        let q = random_orthonormal::<T>(dim, &mut s);
        let active = dim - null_dim;
        let scale = 1.0 / (rank as f64).sqrt();
        let factors = (0..samples)
            .map(|_| {
                let coeffs: Tensor<T> =
                    Tensor::from_fn([active, rank], |_| T::lit(scale * s.normal()));
                // Columns of `q` beyond `active` span the null space.
                let basis = Tensor::from_fn([dim, active], |i| q.get2(i / active, i % active));
                matmul(&basis, &coeffs).expect("shapes agree")
            })
            .collect();
        Self::contiguous(dim, batch_size, factors)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> usize {
        self.factors.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batches(&self) -> usize {
        self.partition.len()
    }

    pub fn partition(&self) -> &[Vec<usize>] {
        &self.partition
    }

    pub fn factor(&self, n: usize) -> &Tensor<T> {
        &self.factors[n]
    }

    pub fn hessian(&self, n: usize) -> Tensor<T> {
        matmul_nt(&self.factors[n], &self.factors[n]).expect("factor is [d, r]")
    }

    /// Same samples, batches of `factor·B` formed by joining consecutive batches.
    pub fn merge_batches(&self, factor: usize) -> Result<Self> {
        ensure!(
            factor >= 1 && self.batches().is_multiple_of(factor),
            "merge factor {} must divide the {} batches",
            factor,
            self.batches()
        );
        let partition = self.partition.chunks(factor).map(|c| c.concat()).collect();
        Self::new(self.dim, self.factors.clone(), partition)
    }
}

/// Columns of a Gram–Schmidt orthonormalized Gaussian matrix, as a `[d, d]` tensor.
pub fn random_orthonormal<T: Scalar>(d: usize, stream: &mut RngStream) -> Tensor<T> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| stream.normal()).collect();
        for _ in 0..2 {
            for c in &cols {
                let p = dot(&v, c);
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = l2_norm(&v);
        if n > 1e-6 {
            cols.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Tensor::from_fn([d, d], |i| T::lit(cols[i % d][i / d]))
}

/// `⟨H⟩_k = (1/B) Σ_{n ∈ B(k)} H_n`.
pub fn batch_hessian<T: Scalar>(p: &QuadraticProblem<T>, k: usize) -> Result<Tensor<T>> {
    ensure!(
        k < p.batches(),
        "batch {} out of range ({} batches)",
        k,
        p.batches()
    );
    let d = p.dim;
    let mut sum = Tensor::zeros([d, d]);
    for &n in &p.partition[k] {
        let h = p.hessian(n);
        sum.data_mut()
            .iter_mut()
            .zip(h.data())
            .for_each(|(a, &b)| *a += b);
    }
    let inv = T::one() / T::from_usize(p.batch_size).expect("fits");
    Ok(sum.map(|v| v * inv))
}

#[derive(Clone, Debug)]
pub struct SpectralStats<T> {
    pub batch: Vec<Tensor<T>>,
    /// Top eigenvalue of each `⟨H⟩_k`.
    pub batch_lambda: Vec<T>,
    /// `⟨H⟩`.
    pub mean: Tensor<T>,
    /// `⟨H²⟩ = mean_k ⟨H⟩_k²`.
    pub mean_sq: Tensor<T>,
    /// `max_k λ_max(⟨H⟩_k)`.
    pub lambda_max: T,
    /// `λ_max(⟨H⟩)`.
    pub lambda_bar_max: T,
    /// Smallest eigenvalue of `⟨H⟩` on the complement of its null space (0 if that is empty).
    pub lambda_min: T,
    /// Orthonormal basis of the null space of `⟨H⟩`.
    pub null_basis: Vec<Vec<T>>,
    /// Orthonormal basis of its complement.
    pub range_basis: Vec<Vec<T>>,
    /// Orthogonal projector onto the complement.
    pub projector: Tensor<T>,
}

fn top_eigenvalue<T: Scalar>(a: &Tensor<T>, seed: u64) -> Result<T> {
    if a.shape()[0] <= DENSE_LIMIT {
        let e = symmetric_eigen(a)?;
        Ok(*e.values.last().expect("non-empty"))
    } else {
        Ok(power_iteration(a, 1e-10, 100_000, seed)?.0)
    }
}

pub fn spectral_stats<T: Scalar>(p: &QuadraticProblem<T>) -> Result<SpectralStats<T>> {
    let d = p.dim;
    let k = p.batches();
    let batch: Vec<Tensor<T>> = (0..k).map(|i| batch_hessian(p, i)).collect::<Result<_>>()?;
    let batch_lambda: Vec<T> = batch
        .iter()
        .enumerate()
        .map(|(i, h)| top_eigenvalue(h, i as u64))
        .collect::<Result<_>>()?;
    let lambda_max = batch_lambda.iter().copied().fold(T::zero(), T::max);
    let inv_k = T::one() / T::from_usize(k).expect("fits");
    let mut mean = Tensor::zeros([d, d]);
    let mut mean_sq = Tensor::zeros([d, d]);
    for h in &batch {
        let h2 = matmul(h, h)?;
        mean.data_mut()
            .iter_mut()
            .zip(h.data())
            .for_each(|(a, &b)| *a += b);
        mean_sq
            .data_mut()
            .iter_mut()
            .zip(h2.data())
            .for_each(|(a, &b)| *a += b);
    }
    let mean = mean.map(|v| v * inv_k);
    let mean_sq = mean_sq.map(|v| v * inv_k);
    let eig = symmetric_eigen(&mean)?;
    let lambda_bar_max = *eig.values.last().expect("non-empty");
    let threshold = T::lit(NULL_TOL) * lambda_bar_max;
    let in_range = |i: usize| lambda_bar_max > T::zero() && eig.values[i] >= threshold;
    let lambda_min = (0..d)
        .filter(|&i| in_range(i))
        .map(|i| eig.values[i])
        .next()
        .unwrap_or(T::zero());
    let null_basis = (0..d)
        .filter(|&i| !in_range(i))
        .map(|i| eig.vectors[i].clone())
        .collect();
    let range_basis = (0..d)
        .filter(|&i| in_range(i))
        .map(|i| eig.vectors[i].clone())
        .collect();
    let projector = outer_sum(&eig, in_range);
    Ok(SpectralStats {
        batch,
        batch_lambda,
        mean,
        mean_sq,
        lambda_max,
        lambda_bar_max,
        lambda_min,
        null_basis,
        range_basis,
        projector,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Stable,
    UnstablePossible,
}

/// Stable iff `λ_max < 2/η`.
pub fn theorem_check<T: Scalar>(stats: &SpectralStats<T>, eta: f64) -> Prediction {
    if stats.lambda_max.to_f64_lossless() < 2.0 / eta {
        Prediction::Stable
    } else {
        Prediction::UnstablePossible
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Converged,
    Diverged,
    Undecided,
}

#[derive(Clone, Debug)]
pub struct Simulation<T> {
    pub verdict: Verdict,
    /// Steps taken until the verdict (or the step budget).
    pub steps: usize,
    pub final_w: Vec<T>,
    /// `(‖w_t‖, ‖P w_t‖)` for `t = 0..=steps`, when recording.
    pub trace: Vec<(T, T)>,
}

#[derive(Clone, Copy, Debug)]
pub struct SimOptions {
    pub max_steps: usize,
    pub record: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            max_steps: DEFAULT_MAX_STEPS,
            record: false,
        }
    }
}

/// `w ← w − η ⟨H⟩_k w` for one batch.
fn sgd_apply<T: Scalar>(h: &Tensor<T>, eta: T, w: &mut [T], scratch: &mut [T]) {
    let d = w.len();
    for (i, s) in scratch.iter_mut().enumerate() {
        *s = dot(&h.data()[i * d..(i + 1) * d], w);
    }
    for (wi, &s) in w.iter_mut().zip(scratch.iter()) {
        *wi -= eta * s;
    }
}

/// Iterates `w_{t+1} = w_t − η ⟨H⟩_{k(t)} w_t` with `k(t)` uniform, until the norm leaves
/// `[1e-8‖P w0‖, 1e8‖w0‖]` (projected below, full above) or the step budget runs out.
pub fn simulate<T: Scalar>(
    p: &QuadraticProblem<T>,
    stats: &SpectralStats<T>,
    eta: f64,
    w0: &[T],
    opts: SimOptions,
    stream: &mut RngStream,
) -> Result<Simulation<T>> {
    ensure!(eta > 0.0, "step size must be positive");
    ensure!(
        w0.len() == p.dim,
        "w0 has {} entries, problem dimension is {}",
        w0.len(),
        p.dim
    );
    let eta_t = T::lit(eta);
    let up = T::lit(DIVERGE_FACTOR) * l2_norm(w0);
    let p0 = l2_norm(&mat_vec(&stats.projector, w0));
    let down = T::lit(CONVERGE_FACTOR) * p0;
    let mut w = w0.to_vec();
    let mut scratch = vec![T::zero(); p.dim];
    let mut trace = Vec::new();
    if opts.record {
        trace.push((l2_norm(&w), p0));
    }
    if p0 == T::zero() {
        return Ok(Simulation {
            verdict: Verdict::Converged,
            steps: 0,
            final_w: w,
            trace,
        });
    }
    let mut verdict = Verdict::Undecided;
    let mut steps = opts.max_steps;
    for t in 1..=opts.max_steps {
        let k = stream.below(p.batches());
        sgd_apply(&stats.batch[k], eta_t, &mut w, &mut scratch);
        let norm = l2_norm(&w);
        let proj = l2_norm(&mat_vec(&stats.projector, &w));
        if opts.record {
            trace.push((norm, proj));
        }
        if !(norm <= up) {
            verdict = Verdict::Diverged;
        } else if proj < down {
            verdict = Verdict::Converged;
        }
        if verdict != Verdict::Undecided {
            steps = t;
            break;
        }
    }
    Ok(Simulation {
        verdict,
        steps,
        final_w: w,
        trace,
    })
}

/// `λ`-tight instance: every `H_n` is zero except in one batch `k*`, whose average has top
/// eigenvalue exactly `λ` (other eigenvalues in `[λ/2, λ]`). Only steps drawing `k*` move `w`.
/// Returns the problem and `k*`.
pub fn tightness_construct<T: Scalar>(
    dim: usize,
    batch_size: usize,
    samples: usize,
    lambda: f64,
    seed: u64,
) -> Result<(QuadraticProblem<T>, usize)> {
    ensure!(lambda > 0.0, "λ must be positive, got {}", lambda);
    ensure!(
        batch_size >= 1 && samples.is_multiple_of(batch_size),
        "batch size {} must divide N = {}",
        batch_size,
        samples
    );
    let mut s = RngStream::new(seed).split("tight");
    let batches = samples / batch_size;
    let k_star = s.below(batches);
    let q = random_orthonormal::<f64>(dim, &mut s);
    let targets: Vec<f64> = (0..dim)
        .map(|i| {
            if i == 0 {
                lambda
            } else {
                lambda * (0.5 + 0.5 * s.next_f64())
            }
        })
        .collect();
    // Sample n of batch k* gets eigenvalues B·a_{n,i}·μ_i with weights a_{·,i} summing to one.
    let weights: Vec<Vec<f64>> = {
        let raw: Vec<Vec<f64>> = (0..batch_size)
            .map(|_| (0..dim).map(|_| 0.1 + s.next_f64()).collect())
            .collect();
        let sums: Vec<f64> = (0..dim).map(|i| raw.iter().map(|r| r[i]).sum()).collect();
        raw.iter()
            .map(|r| r.iter().zip(&sums).map(|(a, t)| a / t).collect())
            .collect()
    };
    let factors = (0..samples)
        .map(|n| {
            if n / batch_size != k_star {
                return Tensor::zeros([dim, 1]);
            }
            let a = &weights[n % batch_size];
            let scale: Vec<f64> = (0..dim)
                .map(|i| (batch_size as f64 * a[i] * targets[i]).sqrt())
                .collect();
            Tensor::from_fn([dim, dim], |idx| {
                let (r, c) = (idx / dim, idx % dim);
                T::lit(q.get2(r, c) * scale[c])
            })
        })
        .collect();
    Ok((
        QuadraticProblem::contiguous(dim, batch_size, factors)?,
        k_star,
    ))
}

/// `wᵀ(I − 2η⟨H⟩ + η²⟨H²⟩)w`: the exact expectation of `‖w_{t+1}‖²` given `w_t = w`.
pub fn second_moment_form<T: Scalar>(stats: &SpectralStats<T>, eta: f64, w: &[T]) -> T {
    let eta = T::lit(eta);
    let two = T::lit(2.0);
    dot(w, w) - two * eta * quad_form(&stats.mean, w) + eta * eta * quad_form(&stats.mean_sq, w)
}

/// `max_{v ∈ V̄, ‖v‖ = 1} vᵀ(I − 2η⟨H⟩ + η²⟨H²⟩)v` and whether it is below 1.
pub fn second_moment_condition<T: Scalar>(stats: &SpectralStats<T>, eta: f64) -> Result<(T, bool)> {
    let basis = &stats.range_basis;
    let s = basis.len();
    if s == 0 {
        return Ok((T::zero(), true));
    }
    let d = stats.mean.shape()[0];
    let eta_t = T::lit(eta);
    let two = T::lit(2.0);
    let mut a = Tensor::from_fn([d, d], |i| {
        let (r, c) = (i / d, i % d);
        let id = if r == c { T::one() } else { T::zero() };
        id - two * eta_t * stats.mean.get2(r, c) + eta_t * eta_t * stats.mean_sq.get2(r, c)
    });
    // Symmetrize against rounding in ⟨H²⟩.
    for r in 0..d {
        for c in r + 1..d {
            let v = (a.get2(r, c) + a.get2(c, r)) / two;
            a.set2(r, c, v);
            a.set2(c, r, v);
        }
    }
    let av: Vec<Vec<T>> = basis.iter().map(|u| mat_vec(&a, u)).collect();
    let restricted = Tensor::from_fn([s, s], |i| dot(&basis[i / s], &av[i % s]));
    let e = symmetric_eigen(&restricted)?;
    let top = *e.values.last().expect("non-empty");
    Ok((top, top < T::one()))
}

/// `(1 − η(2 − ηλ_max)λ_min)ᵗ ‖P w0‖²`, valid when `λ_max < 2/η`.
pub fn rate_bound<T: Scalar>(stats: &SpectralStats<T>, eta: f64, t: u32, w0: &[T]) -> Result<T> {
    let lmax = stats.lambda_max.to_f64_lossless();
    ensure!(
        eta > 0.0 && lmax < 2.0 / eta,
        "rate bound needs λ_max = {} < 2/η = {}",
        lmax,
        2.0 / eta
    );
    let factor = 1.0 - eta * (2.0 - eta * lmax) * stats.lambda_min.to_f64_lossless();
    let pw = mat_vec(&stats.projector, w0);
    Ok(T::lit(factor.max(0.0).powi(t as i32)) * dot(&pw, &pw))
}

/// `(I − η⟨H⟩)ᵗ w0`, the expected iterate.
pub fn first_moment<T: Scalar>(stats: &SpectralStats<T>, eta: f64, t: usize, w0: &[T]) -> Vec<T> {
    let mut w = w0.to_vec();
    let mut scratch = vec![T::zero(); w.len()];
    for _ in 0..t {
        sgd_apply(&stats.mean, T::lit(eta), &mut w, &mut scratch);
    }
    w
}

/// Monte-Carlo moments over independent trajectories of `steps` steps, trajectory `i`
/// drawing batches from `stream.split_index(i)`. Returns, for `t = 0..=steps`, the mean
/// iterate and the mean of `‖P w_t‖²`, combined in trajectory order.
pub fn monte_carlo_moments<T: Scalar>(
    p: &QuadraticProblem<T>,
    stats: &SpectralStats<T>,
    eta: f64,
    w0: &[T],
    steps: usize,
    trajectories: usize,
    stream: &RngStream,
) -> Result<(Vec<Vec<T>>, Vec<T>)> {
    ensure!(trajectories >= 1, "need at least one trajectory");
    ensure!(
        w0.len() == p.dim,
        "w0 has {} entries, problem dimension is {}",
        w0.len(),
        p.dim
    );
    let eta_t = T::lit(eta);
    // Every H_k vanishes on the null space of ⟨H⟩, so that component of w0 never moves.
    // Iterating in range-basis coordinates keeps round-off from parking there, where it
    // would put a floor of about ε²‖w0‖² under ‖P w_t‖².
    let basis = &stats.range_basis;
    let r = basis.len();
    let reduced: Vec<Tensor<T>> = stats
        .batch
        .iter()
        .map(|h| {
            let hb: Vec<Vec<T>> = basis.iter().map(|b| mat_vec(h, b)).collect();
            let mut m = Tensor::zeros([r, r]);
            for i in 0..r {
                for j in 0..r {
                    m.data_mut()[i * r + j] = dot(&basis[i], &hb[j]);
                }
            }
            m
        })
        .collect();
    let c0: Vec<T> = basis.iter().map(|b| dot(b, w0)).collect();
    let mut fixed = w0.to_vec();
    for (b, &c) in basis.iter().zip(&c0) {
        fixed.iter_mut().zip(b).for_each(|(f, &v)| *f -= c * v);
    }
    let run = |i: usize| {
        let mut s = stream.split_index(i as u64);
        let mut c = c0.clone();
        let mut scratch = vec![T::zero(); r];
        let mut ws = Vec::with_capacity((steps + 1) * p.dim);
        let mut proj = Vec::with_capacity(steps + 1);
        for t in 0..=steps {
            if t > 0 {
                let k = s.below(p.batches());
                sgd_apply(&reduced[k], eta_t, &mut c, &mut scratch);
            }
            proj.push(dot(&c, &c));
            let mut w = fixed.clone();
            for (b, &ci) in basis.iter().zip(&c) {
                w.iter_mut().zip(b).for_each(|(x, &v)| *x += ci * v);
            }
            ws.extend(w);
        }
        (ws, proj)
    };
    let mut sum_w = vec![T::zero(); (steps + 1) * p.dim];
    let mut sum_proj = vec![T::zero(); steps + 1];
    // Bounded blocks run in parallel; partial results are added in trajectory order.
    const BLOCK: usize = 256;
    for start in (0..trajectories).step_by(BLOCK) {
        let end = (start + BLOCK).min(trajectories);
        let block: Vec<(Vec<T>, Vec<T>)> = (start..end).into_par_iter().map(run).collect();
        for (ws, proj) in &block {
            sum_w.iter_mut().zip(ws).for_each(|(a, &b)| *a += b);
            sum_proj.iter_mut().zip(proj).for_each(|(a, &b)| *a += b);
        }
    }
    let n = T::from_usize(trajectories).expect("fits");
    let mean_w = sum_w
        .chunks(p.dim)
        .map(|c| c.iter().map(|&v| v / n).collect())
        .collect();
    let mean_proj = sum_proj.into_iter().map(|v| v / n).collect();
    Ok((mean_w, mean_proj))
}

/// Bisection on `η` for the stability boundary of a problem, treating undecided runs as
/// not converged. Searches `[lo, hi]` until the bracket is narrower than `rel_tol·lo`.
pub fn stability_boundary<T: Scalar>(
    p: &QuadraticProblem<T>,
    stats: &SpectralStats<T>,
    w0: &[T],
    mut lo: f64,
    mut hi: f64,
    rel_tol: f64,
    opts: SimOptions,
    seed: u64,
) -> Result<f64> {
    ensure!(0.0 < lo && lo < hi, "bisection needs 0 < lo < hi");
    let mut probe = 0u64;
    while hi - lo > rel_tol * lo {
        let mid = 0.5 * (lo + hi);
        let mut s = RngStream::new(seed).split_index(probe);
        probe += 1;
        let sim = simulate(p, stats, mid, w0, opts, &mut s)?;
        if sim.verdict == Verdict::Converged {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub trial: usize,
    pub t: usize,
    pub norm: f64,
    pub proj_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerdictRecord {
    pub eta: f64,
    pub lambda_max: f64,
    pub predicted: Prediction,
    pub observed: Verdict,
}

impl<T: Scalar> Simulation<T> {
    pub fn rows(&self, trial: usize) -> Vec<TrajectoryRow> {
        self.trace
            .iter()
            .enumerate()
            .map(|(t, &(n, pn))| TrajectoryRow {
                trial,
                t,
                norm: n.to_f64_lossless(),
                proj_norm: pn.to_f64_lossless(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
