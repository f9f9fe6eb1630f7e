//! Dense loops shared by the forward ops and their gradient rules.
//!
//! Every kernel accumulates each output element in a fixed order that does
//! not depend on how many rows are processed at once, so a sample's result
//! is the same whether it is computed alone, inside a batch, or on another
//! thread.

use crate::parallel;
use crate::scalar::Real;

/// `a[m×k] · b[k×n]`.
pub(crate) fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    parallel::for_each_row(&mut out, n, m * k * n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

/// `a[m×n] · b[k×n]ᵀ`, giving `m×k`.
pub(crate) fn matmul_a_bt<F: Real>(a: &[F], b: &[F], m: usize, n: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * k];
    parallel::for_each_row(&mut out, k, m * k * n, |i, row| {
        let arow = &a[i * n..(i + 1) * n];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            *o = acc;
        }
    });
    out
}

/// `a[m×k]ᵀ · c[m×n]`, giving `k×n`. Sums over `m` in ascending order.
pub(crate) fn matmul_at_b<F: Real>(a: &[F], c: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * n];
    parallel::for_each_row(&mut out, n, m * k * n, |p, row| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let crow = &c[i * n..(i + 1) * n];
            for (o, &cv) in row.iter_mut().zip(crow) {
                *o = *o + av * cv;
            }
        }
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }
    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
    pub fn in_sample(&self) -> usize {
        self.channels * self.height * self.width
    }
    pub fn out_sample(&self) -> usize {
        self.filters * self.out_pixels()
    }
}

/// Unfolds one sample into a `[C·kh·kw, out_h·out_w]` patch matrix. Rows are
/// ordered (channel, kernel row, kernel column); padding contributes zeros.
fn im2col<F: Real>(x: &[F], g: &ConvGeometry) -> Vec<F> {
    let pixels = g.out_pixels();
    let mut cols = vec![F::zero(); g.patch_len() * pixels];
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * pixels..(row + 1) * pixels];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj >= g.width as isize {
                            continue;
                        }
                        dst[oi * g.out_w + oj] =
                            x[(c * g.height + ii as usize) * g.width + jj as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adds a patch-matrix gradient back onto one sample's input gradient.
fn col2im_add<F: Real>(cols: &[F], g: &ConvGeometry, dx: &mut [F]) {
    let pixels = g.out_pixels();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * pixels..(row + 1) * pixels];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj >= g.width as isize {
                            continue;
                        }
                        let idx = (c * g.height + ii as usize) * g.width + jj as usize;
                        dx[idx] = dx[idx] + src[oi * g.out_w + oj];
                    }
                }
            }
        }
    }
}

/// Multiplies without the inner parallel split; the callers already fan out
/// over samples.
fn matmul_serial<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for (i, row) in out.chunks_mut(n).enumerate() {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

pub(crate) fn conv2d_forward<F: Real>(x: &[F], kernel: &[F], g: &ConvGeometry) -> Vec<F> {
    let mut out = vec![F::zero(); g.batch * g.out_sample()];
    let work = g.batch * g.out_sample() * g.patch_len();
    parallel::for_each_row(&mut out, g.out_sample(), work, |n, dst| {
        let xs = &x[n * g.in_sample()..(n + 1) * g.in_sample()];
        let cols = im2col(xs, g);
        let y = matmul_serial(kernel, &cols, g.filters, g.patch_len(), g.out_pixels());
        dst.copy_from_slice(&y);
    });
    out
}

/// Returns `(d_input, d_kernel)`; either may be skipped.
pub(crate) fn conv2d_backward<F: Real>(
    x: &[F],
    kernel: &[F],
    grad_out: &[F],
    g: &ConvGeometry,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>) {
    let work = g.batch * g.out_sample() * g.patch_len();
    let per_sample: Vec<(Option<Vec<F>>, Option<Vec<F>>)> =
        parallel::map_indices(g.batch, work, |n| {
            let xs = &x[n * g.in_sample()..(n + 1) * g.in_sample()];
            let dy = &grad_out[n * g.out_sample()..(n + 1) * g.out_sample()];
            let cols = im2col(xs, g);
            let dk = want_kernel.then(|| {
                // dy[F×P] · colsᵀ[P×CKK]
                let mut out = vec![F::zero(); g.filters * g.patch_len()];
                let p = g.out_pixels();
                for f in 0..g.filters {
                    let drow = &dy[f * p..(f + 1) * p];
                    for q in 0..g.patch_len() {
                        let crow = &cols[q * p..(q + 1) * p];
                        let mut acc = F::zero();
                        for (&a, &b) in drow.iter().zip(crow) {
                            acc = acc + a * b;
                        }
                        out[f * g.patch_len() + q] = acc;
                    }
                }
                out
            });
            let dx = want_input.then(|| {
                // kernelᵀ[CKK×F] · dy[F×P]
                let p = g.out_pixels();
                let mut dcols = vec![F::zero(); g.patch_len() * p];
                for f in 0..g.filters {
                    let drow = &dy[f * p..(f + 1) * p];
                    for q in 0..g.patch_len() {
                        let kv = kernel[f * g.patch_len() + q];
                        if kv == F::zero() {
                            continue;
                        }
                        let dst = &mut dcols[q * p..(q + 1) * p];
                        for (o, &d) in dst.iter_mut().zip(drow) {
                            *o = *o + kv * d;
                        }
                    }
                }
                let mut dx = vec![F::zero(); g.in_sample()];
                col2im_add(&dcols, g, &mut dx);
                dx
            });
            (dx, dk)
        });

    let dx = want_input.then(|| {
        let mut dx = Vec::with_capacity(g.batch * g.in_sample());
        for (d, _) in &per_sample {
            dx.extend_from_slice(d.as_ref().expect("input grad computed"));
        }
        dx
    });
    let dk = want_kernel.then(|| {
        let mut acc = vec![F::zero(); g.filters * g.patch_len()];
        // Sample-ordered reduction keeps the sum independent of scheduling.
        for (_, d) in &per_sample {
            for (a, &v) in acc.iter_mut().zip(d.as_ref().expect("kernel grad computed")) {
                *a = *a + v;
            }
        }
        acc
    });
    (dx, dk)
}

/// 2×2 max pooling with stride 2 over `[N, C, H, W]`; odd trailing rows and
/// columns are dropped. Returns the pooled values and, for each output, the
/// flat input index of the winning element (first maximum in scan order).
pub(crate) fn maxpool2x2_forward<F: Real>(
    x: &[F],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<F>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let r0 = base + (2 * i) * w + 2 * j;
                let r1 = r0 + w;
                let mut best = r0;
                for idx in [r0 + 1, r1, r1 + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
