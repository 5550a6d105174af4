//! Per-layer forward and backward kernels over flat row-major buffers.

use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn};

use super::params::GroupStats;

pub(crate) fn linear_forward<T: Scalar>(
    x: &[T],
    n: usize,
    fan_in: usize,
    fan_out: usize,
    w: &[T],
    b: &[T],
) -> Vec<T> {
    let mut y = Vec::with_capacity(n * fan_out);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    gemm_nn(n, fan_in, fan_out, x, w, &mut y);
    y
}

/// Returns `dx`; accumulates into `dw`, `db`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    n: usize,
    fan_in: usize,
    fan_out: usize,
    w: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    gemm_tn(fan_in, n, fan_out, x, dy, dw);
    for row in dy.chunks(fan_out) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    let mut dx = vec![T::zero(); n * fan_in];
    gemm_nt(n, fan_out, fan_in, dy, w, &mut dx);
    dx
}

/// im2col for a stride-1 same-padded convolution of one `[C, H, W]` image.
/// Output is `[C·k·k, H·W]`.
fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut out[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &img[(ch * h + sy as usize) * w..(ch * h + sy as usize + 1) * w];
                    for (x, d) in drow.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - pad;
                        *d = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, img: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        img[(ch * h + sy as usize) * w + sx as usize] += src[y * w + x];
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    fn col_len(&self) -> usize {
        self.c_in * self.k * self.k * self.h * self.w
    }
}

pub(crate) fn conv_forward<T: Scalar>(x: &[T], g: &ConvGeom, w: &[T], b: &[T]) -> Vec<T> {
    let hw = g.h * g.w;
    let ckk = g.c_in * g.k * g.k;
    let mut col = vec![T::zero(); g.col_len()];
    let mut y = vec![T::zero(); g.n * g.c_out * hw];
    let in_len = g.c_in * hw;
    for s in 0..g.n {
        im2col(
            &x[s * in_len..(s + 1) * in_len],
            g.c_in,
            g.h,
            g.w,
            g.k,
            &mut col,
        );
        let out = &mut y[s * g.c_out * hw..(s + 1) * g.c_out * hw];
        for (co, row) in out.chunks_mut(hw).enumerate() {
            row.iter_mut().for_each(|v| *v = b[co]);
        }
        gemm_nn(g.c_out, ckk, hw, w, &col, out);
    }
    y
}

/// Recomputes each sample's im2col from the layer input rather than caching it.
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    g: &ConvGeom,
    w: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let hw = g.h * g.w;
    let ckk = g.c_in * g.k * g.k;
    let in_len = g.c_in * hw;
    let mut dx = vec![T::zero(); g.n * in_len];
    let mut col = vec![T::zero(); g.col_len()];
    let mut dcols = vec![T::zero(); g.col_len()];
    for s in 0..g.n {
        im2col(
            &x[s * in_len..(s + 1) * in_len],
            g.c_in,
            g.h,
            g.w,
            g.k,
            &mut col,
        );
        let dout = &dy[s * g.c_out * hw..(s + 1) * g.c_out * hw];
        gemm_nt(g.c_out, hw, ckk, dout, &col, dw);
        for (co, row) in dout.chunks(hw).enumerate() {
            let mut acc = T::zero();
            for &v in row {
                acc += v;
            }
            db[co] += acc;
        }
        dcols.iter_mut().for_each(|v| *v = T::zero());
        gemm_tn(ckk, g.c_out, hw, w, dout, &mut dcols);
        col2im(
            &dcols,
            g.c_in,
            g.h,
            g.w,
            g.k,
            &mut dx[s * in_len..(s + 1) * in_len],
        );
    }
    dx
}

/// `[N, C, H, W]` → `[N, C, H/s, W/s]`.
pub(crate) fn pool_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    s: usize,
) -> Vec<T> {
    let (oh, ow) = (h / s, w / s);
    let scale = T::one() / T::from_usize(s * s).expect("pool area");
    let mut y = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut y[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..s {
                    for dx in 0..s {
                        acc += src[(oy * s + dy) * w + ox * s + dx];
                    }
                }
                dst[oy * ow + ox] = acc * scale;
            }
        }
    }
    y
}

pub(crate) fn pool_backward<T: Scalar>(
    dy: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    s: usize,
) -> Vec<T> {
    let (oh, ow) = (h / s, w / s);
    let scale = T::one() / T::from_usize(s * s).expect("pool area");
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &dy[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = src[oy * ow + ox] * scale;
                for dy in 0..s {
                    for dx in 0..s {
                        dst[(oy * s + dy) * w + ox * s + dx] = g;
                    }
                }
            }
        }
    }
    dx
}

/// Layout of a batch-norm input: `n` samples, `f` features, `spatial` values per feature per sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BnGeom {
    pub n: usize,
    pub f: usize,
    pub spatial: usize,
}

impl BnGeom {
    #[inline]
    fn at(&self, sample: usize, feature: usize) -> usize {
        (sample * self.f + feature) * self.spatial
    }
}

pub(crate) struct BnForward<T> {
    pub xhat: Vec<T>,
    /// `[groups × f]`.
    pub inv_std: Vec<T>,
    pub stats: Vec<GroupStats<T>>,
}

/// Normalizes each consecutive group of `group` samples with its own statistics,
/// overwriting `x` with the output.
pub(crate) fn bn_train_forward<T: Scalar>(
    x: &mut [T],
    geo: BnGeom,
    group: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> BnForward<T> {
    let groups = geo.n / group;
    let count = T::from_usize(group * geo.spatial).expect("count fits");
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); groups * geo.f];
    let mut stats = Vec::with_capacity(groups);
    for g in 0..groups {
        let samples = g * group..(g + 1) * group;
        let mut means = vec![T::zero(); geo.f];
        let mut vars = vec![T::zero(); geo.f];
        for f in 0..geo.f {
            let mut sum = T::zero();
            for s in samples.clone() {
                let base = geo.at(s, f);
                for &v in &x[base..base + geo.spatial] {
                    sum += v;
                }
            }
            let mean = sum / count;
            let mut sq = T::zero();
            for s in samples.clone() {
                let base = geo.at(s, f);
                for &v in &x[base..base + geo.spatial] {
                    sq += (v - mean) * (v - mean);
                }
            }
            let var = sq / count;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[g * geo.f + f] = istd;
            means[f] = mean;
            vars[f] = var;
            for s in samples.clone() {
                let base = geo.at(s, f);
                for i in base..base + geo.spatial {
                    let xh = (x[i] - mean) * istd;
                    xhat[i] = xh;
                    x[i] = gamma[f] * xh + beta[f];
                }
            }
        }
        stats.push(GroupStats {
            mean: means,
            var: vars,
        });
    }
    BnForward {
        xhat,
        inv_std,
        stats,
    }
}

pub(crate) fn bn_eval_forward<T: Scalar>(
    x: &mut [T],
    geo: BnGeom,
    mean: &[T],
    var: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> BnForward<T> {
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    for s in 0..geo.n {
        for f in 0..geo.f {
            let base = geo.at(s, f);
            for i in base..base + geo.spatial {
                let xh = (x[i] - mean[f]) * inv_std[f];
                xhat[i] = xh;
                x[i] = gamma[f] * xh + beta[f];
            }
        }
    }
    BnForward {
        xhat,
        inv_std,
        stats: Vec::new(),
    }
}

/// Backward through batch norm. With `group = None` the statistics were constants
/// (eval mode); otherwise they were computed per ghost group of that size.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    geo: BnGeom,
    group: Option<usize>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); dy.len()];
    for f in 0..geo.f {
        let mut sg = T::zero();
        let mut sb = T::zero();
        for s in 0..geo.n {
            let base = geo.at(s, f);
            for i in base..base + geo.spatial {
                sg += dy[i] * xhat[i];
                sb += dy[i];
            }
        }
        dgamma[f] += sg;
        dbeta[f] += sb;
    }
    match group {
        None => {
            for s in 0..geo.n {
                for f in 0..geo.f {
                    let scale = gamma[f] * inv_std[f];
                    let base = geo.at(s, f);
                    for i in base..base + geo.spatial {
                        dx[i] = dy[i] * scale;
                    }
                }
            }
        }
        Some(group) => {
            let m = T::from_usize(group * geo.spatial).expect("count fits");
            for g in 0..geo.n / group {
                let samples = g * group..(g + 1) * group;
                for f in 0..geo.f {
                    let istd = inv_std[g * geo.f + f];
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for s in samples.clone() {
                        let base = geo.at(s, f);
                        for i in base..base + geo.spatial {
                            let d = dy[i] * gamma[f];
                            sum_d += d;
                            sum_dx += d * xhat[i];
                        }
                    }
                    for s in samples.clone() {
                        let base = geo.at(s, f);
                        for i in base..base + geo.spatial {
                            let d = dy[i] * gamma[f];
                            dx[i] = istd / m * (m * d - sum_d - xhat[i] * sum_dx);
                        }
                    }
                }
            }
        }
    }
    dx
}
