//! Numeric kernels behind the image ops. All image tensors are `[N, C, H, W]`.

use rayon::prelude::*;

use crate::tensor::{Real, Tensor};

/// Maps `f` over sample indices, optionally on the rayon pool. Results come
/// back in index order either way, so reductions over them are deterministic.
pub(crate) fn map_samples<R, F>(n: usize, parallel: bool, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    if parallel && n > 1 {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

pub(crate) fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

/// Unfolds one `[C, H, W]` image into `[C*9, H*W]` patches (zero padded).
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            out[0] = T::zero();
                            out[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => out.copy_from_slice(src),
                        _ => {
                            out[..w - 1].copy_from_slice(&src[1..]);
                            out[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, x: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, &s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, &s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3×3 convolution, stride 1, zero "same" padding.
/// `weight` is `[Cout, Cin, 3, 3]`, `bias` is `[Cout]`.
pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    parallel: bool,
) -> Tensor<T> {
    let (n, cin, h, w) = dims4(x.shape());
    let cout = weight.shape()[0];
    let hw = h * w;
    let k = cin * 9;
    let per_sample = map_samples(n, parallel, |s| {
        let mut cols = vec![T::zero(); k * hw];
        im2col(&x.data()[s * cin * hw..(s + 1) * cin * hw], cin, h, w, &mut cols);
        let mut out = vec![T::zero(); cout * hw];
        for (co, row) in out.chunks_mut(hw).enumerate() {
            row.fill(bias.data()[co]);
        }
        T::gemm(cout, k, hw, weight.data(), false, &cols, false, &mut out, true);
        out
    });
    let mut data = Vec::with_capacity(n * cout * hw);
    for out in per_sample {
        data.extend_from_slice(&out);
    }
    Tensor::new(vec![n, cout, h, w], data).expect("conv output shape")
}

pub(crate) struct ConvGrads<T: Real> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
    parallel: bool,
) -> ConvGrads<T> {
    let (n, cin, h, w) = dims4(x.shape());
    let cout = weight.shape()[0];
    let hw = h * w;
    let k = cin * 9;
    let per_sample = map_samples(n, parallel, |s| {
        let g = &grad_out.data()[s * cout * hw..(s + 1) * cout * hw];
        let mut cols = vec![T::zero(); k * hw];
        im2col(&x.data()[s * cin * hw..(s + 1) * cin * hw], cin, h, w, &mut cols);
        let mut gw = vec![T::zero(); cout * k];
        T::gemm(cout, hw, k, g, false, &cols, true, &mut gw, false);
        let gb: Vec<T> = g.chunks(hw).map(|row| row.iter().copied().sum()).collect();
        let gx = need_input.then(|| {
            T::gemm(k, cout, hw, weight.data(), true, g, false, &mut cols, false);
            let mut gx = vec![T::zero(); cin * hw];
            col2im(&cols, cin, h, w, &mut gx);
            gx
        });
        (gw, gb, gx)
    });
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[cout]);
    let mut gx = need_input.then(|| Vec::with_capacity(x.len()));
    for (w_s, b_s, x_s) in per_sample {
        for (a, b) in gw.data_mut().iter_mut().zip(&w_s) {
            *a += *b;
        }
        for (a, b) in gb.data_mut().iter_mut().zip(&b_s) {
            *a += *b;
        }
        if let (Some(acc), Some(part)) = (gx.as_mut(), x_s) {
            acc.extend_from_slice(&part);
        }
    }
    ConvGrads {
        input: gx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("conv grad shape")),
        weight: gw,
        bias: gb,
    }
}

pub(crate) fn avg_pool2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dims4(x.shape());
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let src = x.data();
    for (p, dst) in out.data_mut().chunks_mut(ho * wo).enumerate() {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xo in 0..wo {
                let i = 2 * y * w + 2 * xo;
                dst[y * wo + xo] = (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward<T: Real>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Tensor<T> {
    let (_, _, h, w) = dims4(input_shape);
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut gx = Tensor::zeros(input_shape);
    for (p, plane) in gx.data_mut().chunks_mut(h * w).enumerate() {
        let g = &grad_out.data()[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..h {
            for xi in 0..w {
                plane[y * w + xi] = g[(y / 2) * wo + xi / 2] * quarter;
            }
        }
    }
    gx
}

pub(crate) fn upsample2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dims4(x.shape());
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for (p, dst) in out.data_mut().chunks_mut(ho * wo).enumerate() {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xo in 0..wo {
                dst[y * wo + xo] = plane[(y / 2) * w + xo / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Tensor<T> {
    let (_, _, h, w) = dims4(input_shape);
    let wo = 2 * w;
    let mut gx = Tensor::zeros(input_shape);
    for (p, plane) in gx.data_mut().chunks_mut(h * w).enumerate() {
        let g = &grad_out.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..h {
            for xi in 0..w {
                let i = 2 * y * wo + 2 * xi;
                plane[y * w + xi] = g[i] + g[i + 1] + g[i + wo] + g[i + wo + 1];
            }
        }
    }
    gx
}

pub(crate) fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, ca, h, w) = dims4(a.shape());
    let cb = b.shape()[1];
    let hw = h * w;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for s in 0..n {
        data.extend_from_slice(&a.data()[s * ca * hw..(s + 1) * ca * hw]);
        data.extend_from_slice(&b.data()[s * cb * hw..(s + 1) * cb * hw]);
    }
    Tensor::new(vec![n, ca + cb, h, w], data).expect("concat shape")
}

pub(crate) fn split_channels<T: Real>(g: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = dims4(g.shape());
    let cb = c - ca;
    let hw = h * w;
    let mut da = Vec::with_capacity(n * ca * hw);
    let mut db = Vec::with_capacity(n * cb * hw);
    for s in g.data().chunks(c * hw) {
        da.extend_from_slice(&s[..ca * hw]);
        db.extend_from_slice(&s[ca * hw..]);
    }
    (
        Tensor::new(vec![n, ca, h, w], da).expect("split shape"),
        Tensor::new(vec![n, cb, h, w], db).expect("split shape"),
    )
}

/// Per-channel statistics over the batch and spatial axes (biased variance).
pub(crate) fn channel_stats<T: Real>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = dims4(x.shape());
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut sum = 0.0;
        for s in 0..n {
            sum += x.data()[(s * c + ci) * hw..][..hw].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = sum / count;
        let mut sq = 0.0;
        for s in 0..n {
            sq += x.data()[(s * c + ci) * hw..][..hw]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ci] = m;
        var[ci] = sq / count;
    }
    (mean, var)
}

/// Normalizes with the given statistics; returns `(y, xhat, inv_std)`.
pub(crate) fn batch_norm_apply<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let (n, c, h, w) = dims4(x.shape());
    let hw = h * w;
    let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for s in 0..n {
        for ci in 0..c {
            let off = (s * c + ci) * hw;
            let m = T::of(mean[ci]);
            let (g, b, is) = (gamma.data()[ci], beta.data()[ci], inv_std[ci]);
            for i in off..off + hw {
                let xh = (x.data()[i] - m) * is;
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = g * xh + b;
            }
        }
    }
    (y, xhat, inv_std)
}

pub(crate) struct NormGrads<T: Real> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Gradient of batch normalization. With `batch_stats` the statistics are
/// functions of the input; otherwise they are constants.
pub(crate) fn batch_norm_backward<T: Real>(
    grad_out: &Tensor<T>,
    xhat: &Tensor<T>,
    gamma: &Tensor<T>,
    inv_std: &[T],
    batch_stats: bool,
) -> NormGrads<T> {
    let (n, c, h, w) = dims4(grad_out.shape());
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut gg = Tensor::zeros(&[c]);
    let mut gb = Tensor::zeros(&[c]);
    let mut gx = Tensor::zeros(grad_out.shape());
    for ci in 0..c {
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for s in 0..n {
            let off = (s * c + ci) * hw;
            for i in off..off + hw {
                let g = grad_out.data()[i].as_f64();
                sum_g += g;
                sum_gx += g * xhat.data()[i].as_f64();
            }
        }
        gg.data_mut()[ci] = T::of(sum_gx);
        gb.data_mut()[ci] = T::of(sum_g);
        let scale = gamma.data()[ci] * inv_std[ci];
        let mean_g = T::of(sum_g / count);
        let mean_gx = T::of(sum_gx / count);
        for s in 0..n {
            let off = (s * c + ci) * hw;
            for i in off..off + hw {
                let g = grad_out.data()[i];
                gx.data_mut()[i] = if batch_stats {
                    scale * (g - mean_g - xhat.data()[i] * mean_gx)
                } else {
                    scale * g
                };
            }
        }
    }
    NormGrads {
        input: gx,
        gamma: gg,
        beta: gb,
    }
}
