//! Forward and backward kernels for the layer types of the U-Net.
//!
//! Convolutions are lowered to GEMM: the 3x3x3 kernels through an im2col
//! buffer built a few x-planes at a time, the 2x2x2 transposed convolution
//! and 1x1x1 heads directly on the channel-major feature maps.

use super::tensor::{matmul, Features, Mat, Real};

pub(crate) const NEG_SLOPE: f64 = 0.01;
pub(crate) const NORM_EPS: f64 = 1e-5;
const KERNEL: usize = 27;
const TARGET_COLS: usize = 8192;

pub(crate) fn conv3_out_dims(dims: [usize; 3], stride: usize) -> [usize; 3] {
    dims.map(|n| (n - 1) / stride + 1)
}

fn planes_per_chunk(out_dims: [usize; 3]) -> usize {
    (TARGET_COLS / (out_dims[1] * out_dims[2]).max(1)).clamp(1, out_dims[0].max(1))
}

/// Maps output index `o` and kernel tap `k` to an input index, if inside.
#[inline]
fn tap(o: usize, k: usize, stride: usize, n: usize) -> Option<usize> {
    (o * stride + k).checked_sub(1).filter(|&i| i < n)
}

/// Fills `col` (`cin*27` rows by `(x1-x0)*oy*oz` columns) for output planes `x0..x1`.
fn im2col<T: Real>(input: &Features<T>, stride: usize, out: [usize; 3], x0: usize, x1: usize, col: &mut [T]) {
    let [nx, ny, nz] = input.dims;
    let [_, oy, oz] = out;
    let plane = oy * oz;
    let cols = (x1 - x0) * plane;
    for ci in 0..input.channels {
        let src = input.channel(ci);
        for k in 0..KERNEL {
            let (kx, ky, kz) = (k / 9, (k / 3) % 3, k % 3);
            let row = &mut col[(ci * KERNEL + k) * cols..(ci * KERNEL + k + 1) * cols];
            for x in x0..x1 {
                let dst = &mut row[(x - x0) * plane..(x - x0 + 1) * plane];
                let Some(ix) = tap(x, kx, stride, nx) else {
                    dst.fill(T::zero());
                    continue;
                };
                for y in 0..oy {
                    let d = &mut dst[y * oz..(y + 1) * oz];
                    let Some(iy) = tap(y, ky, stride, ny) else {
                        d.fill(T::zero());
                        continue;
                    };
                    let s = &src[(ix * ny + iy) * nz..(ix * ny + iy + 1) * nz];
                    if stride == 1 {
                        // iz = z + kz - 1
                        match kz {
                            0 => {
                                d[0] = T::zero();
                                d[1..].copy_from_slice(&s[..nz - 1]);
                            }
                            1 => d.copy_from_slice(s),
                            _ => {
                                d[..oz - 1].copy_from_slice(&s[1..]);
                                d[oz - 1] = T::zero();
                            }
                        }
                    } else {
                        for (z, v) in d.iter_mut().enumerate() {
                            *v = tap(z, kz, stride, nz).map_or(T::zero(), |iz| s[iz]);
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `col` back into `grad` (the adjoint of [`im2col`]).
fn col2im<T: Real>(grad: &mut Features<T>, stride: usize, out: [usize; 3], x0: usize, x1: usize, col: &[T]) {
    let [nx, ny, nz] = grad.dims;
    let [_, oy, oz] = out;
    let plane = oy * oz;
    let cols = (x1 - x0) * plane;
    let n = grad.voxels();
    for ci in 0..grad.channels {
        let dst_ch = &mut grad.data[ci * n..(ci + 1) * n];
        for k in 0..KERNEL {
            let (kx, ky, kz) = (k / 9, (k / 3) % 3, k % 3);
            let row = &col[(ci * KERNEL + k) * cols..(ci * KERNEL + k + 1) * cols];
            for x in x0..x1 {
                let Some(ix) = tap(x, kx, stride, nx) else { continue };
                for y in 0..oy {
                    let Some(iy) = tap(y, ky, stride, ny) else { continue };
                    let s = &row[(x - x0) * plane + y * oz..(x - x0) * plane + (y + 1) * oz];
                    let d = &mut dst_ch[(ix * ny + iy) * nz..(ix * ny + iy + 1) * nz];
                    if stride == 1 {
                        // iz = z + kz - 1
                        let (dst, src) = match kz {
                            0 => (&mut d[..nz - 1], &s[1..]),
                            1 => (&mut d[..], s),
                            _ => (&mut d[1..], &s[..oz - 1]),
                        };
                        for (a, &g) in dst.iter_mut().zip(src) {
                            *a = *a + g;
                        }
                    } else {
                        for (z, &g) in s.iter().enumerate() {
                            if let Some(iz) = tap(z, kz, stride, nz) {
                                d[iz] = d[iz] + g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3x3x3 convolution, zero padding 1, no bias. `weight` is `[cout][cin*27]`.
pub(crate) fn conv3_forward<T: Real>(input: &Features<T>, weight: &[T], cout: usize, stride: usize) -> Features<T> {
    let out_dims = conv3_out_dims(input.dims, stride);
    let mut out = Features::zeros(cout, out_dims);
    let k = input.channels * KERNEL;
    assert_eq!(weight.len(), cout * k);
    let n_out = out.voxels();
    let plane = out_dims[1] * out_dims[2];
    let step = planes_per_chunk(out_dims);
    let mut col = vec![T::zero(); k * step * plane];
    let w = Mat::new(weight, cout, k, k);
    for x0 in (0..out_dims[0]).step_by(step) {
        let x1 = (x0 + step).min(out_dims[0]);
        let cols = (x1 - x0) * plane;
        let col = &mut col[..k * cols];
        im2col(input, stride, out_dims, x0, x1, col);
        let start = x0 * plane;
        matmul(w, Mat::new(col, k, cols, cols), T::zero(), &mut out.data[start..], n_out);
    }
    out
}

/// Accumulates the weight gradient into `dweight` and returns the input gradient.
pub(crate) fn conv3_backward<T: Real>(
    input: &Features<T>,
    weight: &[T],
    stride: usize,
    dout: &Features<T>,
    dweight: &mut [T],
    want_dinput: bool,
) -> Option<Features<T>> {
    let cout = dout.channels;
    let out_dims = dout.dims;
    let k = input.channels * KERNEL;
    let n_out = dout.voxels();
    let plane = out_dims[1] * out_dims[2];
    let step = planes_per_chunk(out_dims);
    let mut col = vec![T::zero(); k * step * plane];
    let mut dcol = if want_dinput {
        vec![T::zero(); k * step * plane]
    } else {
        Vec::new()
    };
    let mut dinput = want_dinput.then(|| Features::zeros(input.channels, input.dims));
    let w = Mat::new(weight, cout, k, k);
    for x0 in (0..out_dims[0]).step_by(step) {
        let x1 = (x0 + step).min(out_dims[0]);
        let cols = (x1 - x0) * plane;
        let start = x0 * plane;
        let g = Mat::new(&dout.data[start..], cout, cols, n_out);
        let col = &mut col[..k * cols];
        im2col(input, stride, out_dims, x0, x1, col);
        // dW += dY * col^T
        matmul(g, Mat::new(col, k, cols, cols).t(), T::one(), dweight, k);
        if let Some(dinput) = dinput.as_mut() {
            let dcol = &mut dcol[..k * cols];
            matmul(w.t(), g, T::zero(), dcol, cols);
            col2im(dinput, stride, out_dims, x0, x1, dcol);
        }
    }
    dinput
}

/// 2x2x2 transposed convolution with stride 2, no bias. `weight` is `[cin][cout*8]`.
pub(crate) fn up_forward<T: Real>(input: &Features<T>, weight: &[T], cout: usize) -> Features<T> {
    let [nx, ny, nz] = input.dims;
    let n = input.voxels();
    let m = cout * 8;
    assert_eq!(weight.len(), input.channels * m);
    let mut tmp = vec![T::zero(); m * n];
    matmul(Mat::new(weight, input.channels, m, m).t(), input.as_mat(), T::zero(), &mut tmp, n);
    let mut out = Features::zeros(cout, [2 * nx, 2 * ny, 2 * nz]);
    let (oy, oz) = (2 * ny, 2 * nz);
    let on = out.voxels();
    for co in 0..cout {
        for off in 0..8 {
            let (a, b, c) = (off / 4, (off / 2) % 2, off % 2);
            let src = &tmp[(co * 8 + off) * n..(co * 8 + off + 1) * n];
            let dst = &mut out.data[co * on..(co + 1) * on];
            for x in 0..nx {
                for y in 0..ny {
                    let base = ((2 * x + a) * oy + 2 * y + b) * oz + c;
                    let s = &src[(x * ny + y) * nz..(x * ny + y + 1) * nz];
                    for (z, &v) in s.iter().enumerate() {
                        dst[base + 2 * z] = v;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn up_backward<T: Real>(
    input: &Features<T>,
    weight: &[T],
    dout: &Features<T>,
    dweight: &mut [T],
) -> Features<T> {
    let [nx, ny, nz] = input.dims;
    let n = input.voxels();
    let cout = dout.channels;
    let m = cout * 8;
    let (oy, oz) = (2 * ny, 2 * nz);
    let on = dout.voxels();
    let mut dtmp = vec![T::zero(); m * n];
    for co in 0..cout {
        for off in 0..8 {
            let (a, b, c) = (off / 4, (off / 2) % 2, off % 2);
            let dst = &mut dtmp[(co * 8 + off) * n..(co * 8 + off + 1) * n];
            let src = &dout.data[co * on..(co + 1) * on];
            for x in 0..nx {
                for y in 0..ny {
                    let base = ((2 * x + a) * oy + 2 * y + b) * oz + c;
                    let d = &mut dst[(x * ny + y) * nz..(x * ny + y + 1) * nz];
                    for (z, v) in d.iter_mut().enumerate() {
                        *v = src[base + 2 * z];
                    }
                }
            }
        }
    }
    let dt = Mat::new(&dtmp, m, n, n);
    // dW (cin x m) += X (cin x n) * dT^T
    matmul(input.as_mat(), dt.t(), T::one(), dweight, m);
    let mut dinput = Features::zeros(input.channels, input.dims);
    matmul(Mat::new(weight, input.channels, m, m), dt, T::zero(), &mut dinput.data, n);
    dinput
}

/// 1x1x1 convolution with bias. `weight` is `[cout][cin]`.
pub(crate) fn pointwise_forward<T: Real>(input: &Features<T>, weight: &[T], bias: &[T]) -> Features<T> {
    let cout = bias.len();
    let n = input.voxels();
    let mut out = Features::zeros(cout, input.dims);
    for (co, &b) in bias.iter().enumerate() {
        out.data[co * n..(co + 1) * n].fill(b);
    }
    matmul(Mat::new(weight, cout, input.channels, input.channels), input.as_mat(), T::one(), &mut out.data, n);
    out
}

pub(crate) fn pointwise_backward<T: Real>(
    input: &Features<T>,
    weight: &[T],
    dout: &Features<T>,
    dweight: &mut [T],
    dbias: &mut [T],
) -> Features<T> {
    let cout = dout.channels;
    let n = input.voxels();
    for (co, db) in dbias.iter_mut().enumerate() {
        *db = *db + dout.channel(co).iter().copied().sum();
    }
    matmul(dout.as_mat(), input.as_mat().t(), T::one(), dweight, input.channels);
    let mut dinput = Features::zeros(input.channels, input.dims);
    matmul(Mat::new(weight, cout, input.channels, input.channels).t(), dout.as_mat(), T::zero(), &mut dinput.data, n);
    dinput
}

/// Saved state of an instance-norm + leaky-ReLU step.
#[derive(Debug, Clone)]
pub(crate) struct NormCache<T> {
    pub xhat: Features<T>,
    pub inv_std: Vec<f64>,
}

fn leaky<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        v * T::cst(NEG_SLOPE)
    }
}

/// Instance normalization with affine `gamma`/`beta`, then leaky ReLU.
pub(crate) fn norm_act_forward<T: Real>(
    mut x: Features<T>,
    gamma: &[T],
    beta: &[T],
    keep_cache: bool,
) -> (Features<T>, Option<NormCache<T>>) {
    let n = x.voxels();
    let mut inv_stds = Vec::with_capacity(x.channels);
    let mut xhat = keep_cache.then(|| Features::zeros(x.channels, x.dims));
    for c in 0..x.channels {
        let ch = &mut x.data[c * n..(c + 1) * n];
        let mean = ch.iter().map(|v| v.to_f64().unwrap_or(0.0)).sum::<f64>() / n as f64;
        let var = ch
            .iter()
            .map(|v| {
                let d = v.to_f64().unwrap_or(0.0) - mean;
                d * d
            })
            .sum::<f64>()
            / n as f64;
        let inv_std = 1.0 / (var + NORM_EPS).sqrt();
        inv_stds.push(inv_std);
        let (m, s) = (T::cst(mean), T::cst(inv_std));
        let (g, b) = (gamma[c], beta[c]);
        match xhat.as_mut() {
            Some(xh) => {
                for (v, h) in ch.iter_mut().zip(&mut xh.data[c * n..(c + 1) * n]) {
                    *h = (*v - m) * s;
                    *v = leaky(g * *h + b);
                }
            }
            None => {
                for v in ch.iter_mut() {
                    *v = leaky(g * ((*v - m) * s) + b);
                }
            }
        }
    }
    let cache = xhat.map(|xhat| NormCache {
        xhat,
        inv_std: inv_stds,
    });
    (x, cache)
}

pub(crate) fn norm_act_backward<T: Real>(
    cache: &NormCache<T>,
    gamma: &[T],
    beta: &[T],
    mut dout: Features<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Features<T> {
    let n = dout.voxels();
    let slope = T::cst(NEG_SLOPE);
    for c in 0..dout.channels {
        let xh = cache.xhat.channel(c);
        let d = &mut dout.data[c * n..(c + 1) * n];
        let (g, b) = (gamma[c], beta[c]);
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xh = 0.0f64;
        for (dv, &h) in d.iter_mut().zip(xh) {
            if g * h + b <= T::zero() {
                *dv = *dv * slope;
            }
            let dy = dv.to_f64().unwrap_or(0.0);
            sum_dy += dy;
            sum_dy_xh += dy * h.to_f64().unwrap_or(0.0);
        }
        dgamma[c] = dgamma[c] + T::cst(sum_dy_xh);
        dbeta[c] = dbeta[c] + T::cst(sum_dy);
        // dx = g * inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))
        let scale = T::cst(g.to_f64().unwrap_or(0.0) * cache.inv_std[c]);
        let mean_dy = T::cst(sum_dy / n as f64);
        let mean_dy_xh = T::cst(sum_dy_xh / n as f64);
        for (dv, &h) in d.iter_mut().zip(xh) {
            *dv = scale * (*dv - mean_dy - h * mean_dy_xh);
        }
    }
    dout
}
