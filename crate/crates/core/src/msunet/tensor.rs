use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

/// Floating-point element type of network tensors.
pub trait Real: Float + Default + Debug + Sum + Send + Sync + 'static {
    /// Raw strided GEMM, `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing `m x k`,
    /// `k x n` and `m x n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn cst(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("representable constant")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A row-major matrix view over a slice, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    row_stride: usize,
    transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    /// `rows x cols` stored row-major with the given row stride.
    pub fn new(data: &'a [T], rows: usize, cols: usize, row_stride: usize) -> Self {
        assert!(cols <= row_stride || rows <= 1);
        assert!(rows == 0 || data.len() >= (rows - 1) * row_stride + cols, "matrix slice too short");
        Mat {
            data,
            rows,
            cols,
            row_stride,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            transposed: !self.transposed,
            ..self
        }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        let rs = self.row_stride as isize;
        if self.transposed {
            (1, rs)
        } else {
            (rs, 1)
        }
    }
}

/// `out = a * b + beta * out`, where `out` is `m x n` with row stride `out_stride`.
pub(crate) fn matmul<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>, beta: T, out: &mut [T], out_stride: usize) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "inner dimensions differ");
    assert!(n <= out_stride || m <= 1);
    assert!(m == 0 || out.len() >= (m - 1) * out_stride + n, "output slice too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: bounds were asserted above and `out` is borrowed mutably, so it
    // cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            out_stride as isize,
            1,
        );
    }
}

/// Channel-major feature map of one sample: `[channel][x][y][z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Features<T> {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Real> Features<T> {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Features {
            channels,
            dims,
            data: vec![T::zero(); channels * dims.iter().product::<usize>()],
        }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * dims.iter().product::<usize>());
        Features { channels, dims, data }
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub(crate) fn as_mat(&self) -> Mat<'_, T> {
        let n = self.voxels();
        Mat::new(&self.data, self.channels, n, n)
    }

    /// Stacks the channels of `a` then `b`.
    pub fn concat(a: &Self, b: &Self) -> Self {
        assert_eq!(a.dims, b.dims);
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Features {
            channels: a.channels + b.channels,
            dims: a.dims,
            data,
        }
    }

    /// Splits off the first `c` channels.
    pub fn split(self, c: usize) -> (Self, Self) {
        let n = self.voxels();
        let mut first = self.data;
        let second = first.split_off(c * n);
        (
            Features {
                channels: c,
                dims: self.dims,
                data: first,
            },
            Features {
                channels: self.channels - c,
                dims: self.dims,
                data: second,
            },
        )
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn cast<U: Real>(&self) -> Features<U> {
        Features {
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|v| U::cst(v.to_f64().unwrap_or(0.0))).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn matmul_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64).sin()).collect();
        let expect = naive(&a, &b, m, k, n);
        let mut c = vec![0.0; m * n];
        matmul(Mat::new(&a, m, k, k), Mat::new(&b, k, n, n), 0.0, &mut c, n);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        // a^T stored as k x m, b^T stored as n x k.
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut c2 = vec![1.0; m * n];
        matmul(Mat::new(&at, k, m, m).t(), Mat::new(&bt, n, k, k).t(), 0.0, &mut c2, n);
        for (x, y) in c2.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_split_round_trip() {
        let a = Features::from_vec(2, [1, 1, 2], vec![1.0f32, 2.0, 3.0, 4.0]);
        let b = Features::from_vec(1, [1, 1, 2], vec![5.0f32, 6.0]);
        let c = Features::concat(&a, &b);
        assert_eq!(c.channel(2), &[5.0, 6.0]);
        let (x, y) = c.split(2);
        assert_eq!((x, y), (a, b));
    }
}
