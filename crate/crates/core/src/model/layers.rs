//! Per-layer kernels on NCHW / NF buffers.
//!
//! Each forward kernel has a matching backward. Accumulations run in a fixed
//! order so results are reproducible bit for bit.

use crate::tensor::{gemm, MatRef, Scalar, Tensor};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        ConvGeom {
            n,
            c,
            h,
            w,
            out_c,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn spatial(&self) -> usize {
        self.ho * self.wo
    }

    fn cols(&self) -> usize {
        self.n * self.spatial()
    }
}

/// Unfolds patches into a `(C*k*k) x (N*Ho*Wo)` matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.cols();
    let mut cols = vec![T::ZERO; g.rows() * p];
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for ni in 0..g.n {
                    let plane = &x[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let base = ni * g.spatial() + oy * g.wo;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..][..g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a column matrix back onto the input, accumulating overlaps.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for ni in 0..g.n {
                    let plane = &mut dx[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = ni * g.spatial() + oy * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                plane[iy as usize * g.w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let cols = im2col(x.data(), g);
    let p = g.cols();
    let mut mat = vec![T::ZERO; g.out_c * p];
    gemm(
        MatRef::row_major(weight.data(), g.out_c, g.rows()),
        MatRef::row_major(&cols, g.rows(), p),
        T::ZERO,
        &mut mat,
    );
    let s = g.spatial();
    let mut out = vec![T::ZERO; g.n * g.out_c * s];
    for o in 0..g.out_c {
        let b = bias.map_or(T::ZERO, |b| b.data()[o]);
        for ni in 0..g.n {
            let src = &mat[o * p + ni * s..][..s];
            let dst = &mut out[(ni * g.out_c + o) * s..][..s];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v + b;
            }
        }
    }
    Tensor::new(vec![g.n, g.out_c, g.ho, g.wo], out).expect("conv output shape")
}

pub(crate) struct ConvGrads<T> {
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
    pub input: Option<Tensor<T>>,
}

pub(crate) fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
    g: &ConvGeom,
    want_weight: bool,
    want_bias: bool,
    want_input: bool,
) -> ConvGrads<T> {
    let p = g.cols();
    let s = g.spatial();
    let mut dmat = vec![T::ZERO; g.out_c * p];
    for ni in 0..g.n {
        for o in 0..g.out_c {
            let src = &dout.data()[(ni * g.out_c + o) * s..][..s];
            dmat[o * p + ni * s..][..s].copy_from_slice(src);
        }
    }
    let dm = MatRef::row_major(&dmat, g.out_c, p);

    let weight_grad = want_weight.then(|| {
        let cols = im2col(x.data(), g);
        let mut dw = vec![T::ZERO; g.out_c * g.rows()];
        gemm(dm, MatRef::row_major(&cols, g.rows(), p).t(), T::ZERO, &mut dw);
        dw
    });
    let bias_grad = want_bias.then(|| {
        (0..g.out_c)
            .map(|o| {
                let mut acc = T::ZERO;
                for &v in &dmat[o * p..(o + 1) * p] {
                    acc += v;
                }
                acc
            })
            .collect()
    });
    let input_grad = want_input.then(|| {
        let mut dcols = vec![T::ZERO; g.rows() * p];
        gemm(
            MatRef::row_major(weight.data(), g.out_c, g.rows()).t(),
            dm,
            T::ZERO,
            &mut dcols,
        );
        let mut dx = vec![T::ZERO; x.len()];
        col2im(&dcols, g, &mut dx);
        Tensor::new(x.shape().to_vec(), dx).expect("conv input grad shape")
    });
    ConvGrads {
        weight: weight_grad,
        bias: bias_grad,
        input: input_grad,
    }
}

/// `y = x W^T + b` for `x: [N, I]`, `W: [O, I]`.
pub(crate) fn dense_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let (n, i) = (x.shape()[0], x.shape()[1]);
    let o = weight.shape()[0];
    let mut out = vec![T::ZERO; n * o];
    for row in out.chunks_mut(o) {
        row.copy_from_slice(bias.data());
    }
    gemm(
        MatRef::row_major(x.data(), n, i),
        MatRef::row_major(weight.data(), o, i).t(),
        T::ONE,
        &mut out,
    );
    Tensor::new(vec![n, o], out).expect("dense output shape")
}

pub(crate) struct DenseGrads<T> {
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
    pub input: Option<Tensor<T>>,
}

pub(crate) fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
    want_params: bool,
    want_input: bool,
) -> DenseGrads<T> {
    let (n, i) = (x.shape()[0], x.shape()[1]);
    let o = weight.shape()[0];
    let dy = MatRef::row_major(dout.data(), n, o);
    let (weight_grad, bias_grad) = if want_params {
        let mut dw = vec![T::ZERO; o * i];
        gemm(dy.t(), MatRef::row_major(x.data(), n, i), T::ZERO, &mut dw);
        let mut db = vec![T::ZERO; o];
        for row in dout.data().chunks(o) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
        (Some(dw), Some(db))
    } else {
        (None, None)
    };
    let input_grad = want_input.then(|| {
        let mut dx = vec![T::ZERO; n * i];
        gemm(dy, MatRef::row_major(weight.data(), o, i), T::ZERO, &mut dx);
        Tensor::new(vec![n, i], dx).expect("dense input grad shape")
    });
    DenseGrads {
        weight: weight_grad,
        bias: bias_grad,
        input: input_grad,
    }
}

pub(crate) fn relu_forward<T: Scalar>(x: Tensor<T>) -> (Tensor<T>, Vec<bool>) {
    let shape = x.shape().to_vec();
    let mut data = x.into_data();
    let mut active = Vec::with_capacity(data.len());
    for v in &mut data {
        let on = *v > T::ZERO;
        if !on {
            *v = T::ZERO;
        }
        active.push(on);
    }
    (Tensor::new(shape, data).expect("relu shape"), active)
}

pub(crate) fn relu_backward<T: Scalar>(dout: Tensor<T>, active: &[bool]) -> Tensor<T> {
    let shape = dout.shape().to_vec();
    let mut data = dout.into_data();
    for (v, &on) in data.iter_mut().zip(active) {
        if !on {
            *v = T::ZERO;
        }
    }
    Tensor::new(shape, data).expect("relu grad shape")
}

pub(crate) fn maxpool_forward<T: Scalar>(x: &Tensor<T>, size: usize) -> (Tensor<T>, Vec<usize>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if x.data()[idx] > x.data()[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x.data()[best]);
                argmax.push(best);
            }
        }
    }
    (Tensor::new(vec![n, c, ho, wo], out).expect("pool shape"), argmax)
}

pub(crate) fn maxpool_backward<T: Scalar>(dout: &Tensor<T>, argmax: &[usize], in_shape: &[usize]) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    for (&idx, &g) in argmax.iter().zip(dout.data()) {
        dx.data_mut()[idx] += g;
    }
    dx
}

pub(crate) fn avgpool_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let s = x.shape()[2] * x.shape()[3];
    let inv = T::from_f64(1.0 / s as f64);
    let out = x
        .data()
        .chunks(s)
        .map(|plane| {
            let mut acc = T::ZERO;
            for &v in plane {
                acc += v;
            }
            acc * inv
        })
        .collect();
    Tensor::new(vec![n, c], out).expect("avgpool shape")
}

pub(crate) fn avgpool_backward<T: Scalar>(dout: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let s = in_shape[2] * in_shape[3];
    let inv = T::from_f64(1.0 / s as f64);
    let mut data = Vec::with_capacity(dout.len() * s);
    for &g in dout.data() {
        data.extend(std::iter::repeat(g * inv).take(s));
    }
    Tensor::new(in_shape.to_vec(), data).expect("avgpool grad shape")
}

/// Channel-major view: `[N, C, S]` with `S = H*W` (or 1 for flat input).
fn bn_dims(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let s = shape[2..].iter().product::<usize>();
    (n, c, s)
}

pub(crate) struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_stats: bool,
}

pub(crate) struct BnStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

/// Batch-statistics normalization (train mode).
pub(crate) fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
) -> (Tensor<T>, BnCache<T>, BnStats<T>) {
    let (n, c, s) = bn_dims(x.shape());
    let m = (n * s) as f64;
    let eps = T::from_f64(BN_EPS);
    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    for ch in 0..c {
        let mut acc = T::ZERO;
        for ni in 0..n {
            for &v in &x.data()[(ni * c + ch) * s..][..s] {
                acc += v;
            }
        }
        mean[ch] = acc / T::from_f64(m);
        let mut sq = T::ZERO;
        for ni in 0..n {
            for &v in &x.data()[(ni * c + ch) * s..][..s] {
                let d = v - mean[ch];
                sq += d * d;
            }
        }
        var[ch] = sq / T::from_f64(m);
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::ZERO; x.len()];
    let mut out = vec![T::ZERO; x.len()];
    for ni in 0..n {
        for ch in 0..c {
            let off = (ni * c + ch) * s;
            for j in off..off + s {
                let xh = (x.data()[j] - mean[ch]) * inv_std[ch];
                xhat[j] = xh;
                out[j] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    let correction = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
    let var_unbiased = var.iter().map(|&v| v * T::from_f64(correction)).collect();
    (
        Tensor::new(x.shape().to_vec(), out).expect("bn shape"),
        BnCache {
            xhat,
            inv_std,
            batch_stats: true,
        },
        BnStats { mean, var_unbiased },
    )
}

/// Running-statistics normalization (eval mode, or frozen layers).
pub(crate) fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> (Tensor<T>, BnCache<T>) {
    let (n, c, s) = bn_dims(x.shape());
    let eps = T::from_f64(BN_EPS);
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::ZERO; x.len()];
    let mut out = vec![T::ZERO; x.len()];
    for ni in 0..n {
        for ch in 0..c {
            let off = (ni * c + ch) * s;
            for j in off..off + s {
                let xh = (x.data()[j] - running_mean[ch]) * inv_std[ch];
                xhat[j] = xh;
                out[j] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), out).expect("bn shape"),
        BnCache {
            xhat,
            inv_std,
            batch_stats: false,
        },
    )
}

pub(crate) struct BnGrads<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub input: Option<Tensor<T>>,
}

pub(crate) fn batchnorm_backward<T: Scalar>(
    dout: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &[T],
    want_input: bool,
) -> BnGrads<T> {
    let (n, c, s) = bn_dims(dout.shape());
    let m = T::from_f64((n * s) as f64);
    let dy = dout.data();
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    for ch in 0..c {
        for ni in 0..n {
            let off = (ni * c + ch) * s;
            for j in off..off + s {
                dbeta[ch] += dy[j];
                dgamma[ch] += dy[j] * cache.xhat[j];
            }
        }
    }
    let input = want_input.then(|| {
        let mut dx = vec![T::ZERO; dy.len()];
        for ni in 0..n {
            for ch in 0..c {
                let off = (ni * c + ch) * s;
                let scale = gamma[ch] * cache.inv_std[ch];
                for j in off..off + s {
                    dx[j] = if cache.batch_stats {
                        scale / m * (m * dy[j] - dbeta[ch] - cache.xhat[j] * dgamma[ch])
                    } else {
                        scale * dy[j]
                    };
                }
            }
        }
        Tensor::new(dout.shape().to_vec(), dx).expect("bn grad shape")
    });
    BnGrads {
        gamma: dgamma,
        beta: dbeta,
        input,
    }
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
///
/// Per-row max subtraction keeps `exp` in range.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (T, Tensor<T>) {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    assert_eq!(labels.len(), n, "one label per row");
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut grad = vec![T::ZERO; n * k];
    let mut total = T::ZERO;
    for (row, (z, &y)) in logits.data().chunks(k).zip(labels).enumerate() {
        let max = z.iter().copied().fold(z[0], T::max);
        let mut denom = T::ZERO;
        for &v in z {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        total += log_denom - (z[y] - max);
        let g = &mut grad[row * k..(row + 1) * k];
        for (j, &v) in z.iter().enumerate() {
            let p = (v - max).exp() / denom;
            g[j] = (p - if j == y { T::ONE } else { T::ZERO }) * inv_n;
        }
    }
    (total * inv_n, Tensor::new(vec![n, k], grad).expect("xent grad shape"))
}
