//! Dense kernels shared by the forward and backward passes.
//!
//! Matrix products go through `matrixmultiply`; row statistics (layer-norm
//! moments, softmax normalizers) accumulate in `f64`.

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static
{
    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f32(v: f32) -> Self;
    fn from_f64v(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                // SAFETY: extents of all three operands were checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }

            #[inline]
            fn from_f32(v: f32) -> Self {
                v as $t
            }

            #[inline]
            fn from_f64v(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides unsupported");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "operand too small: need index {last}, have {len}");
}

/// Row-major product `c (m x n) = a (m x k) * b (k x n) + beta * c`.
#[inline]
pub fn matmul<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], beta: T) {
    T::gemm_raw(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        beta,
        c,
        n as isize,
        1,
    );
}

/// `c (m x n) = a (m x k) * b^T + beta * c`, with `b` stored row-major as `n x k`.
#[inline]
pub fn matmul_bt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], beta: T) {
    T::gemm_raw(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        1,
        k as isize,
        beta,
        c,
        n as isize,
        1,
    );
}

/// `c (m x n) = a^T * b + beta * c`, with `a` stored row-major as `k x m`
/// and `b` as `k x n`.
#[inline]
pub fn matmul_at<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], beta: T) {
    T::gemm_raw(
        m,
        k,
        n,
        T::one(),
        a,
        1,
        m as isize,
        b,
        n as isize,
        1,
        beta,
        c,
        n as isize,
        1,
    );
}

pub fn add_bias<T: Scalar>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
}

/// Column sums of an `rows x cols` matrix, accumulated into `out`.
pub fn accumulate_col_sums<T: Scalar>(x: &[T], cols: usize, out: &mut [T]) {
    for row in x.chunks(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Layer norm over rows. Returns the normalized rows and per-row inverse std.
pub fn layer_norm<T: Scalar>(
    x: &[T],
    dim: usize,
    gain: &[T],
    bias: &[T],
    out: &mut [T],
    xhat: &mut [T],
    rstd: &mut [T],
) {
    for (r, row) in x.chunks(dim).enumerate() {
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = T::from_f64v(rs);
        for i in 0..dim {
            let h = T::from_f64v((row[i].as_f64() - mean) * rs);
            xhat[r * dim + i] = h;
            out[r * dim + i] = h * gain[i] + bias[i];
        }
    }
}

/// Backward of [`layer_norm`]: accumulates gain/bias grads and writes
/// (adds) the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    dout: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    dim: usize,
    dgain: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
) {
    for (r, drow) in dout.chunks(dim).enumerate() {
        let xh = &xhat[r * dim..(r + 1) * dim];
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xh = 0.0f64;
        for i in 0..dim {
            let dy = (drow[i] * gain[i]).as_f64();
            sum_dy += dy;
            sum_dy_xh += dy * xh[i].as_f64();
            dgain[i] = dgain[i] + drow[i] * xh[i];
            dbias[i] = dbias[i] + drow[i];
        }
        let rs = rstd[r].as_f64();
        let n = dim as f64;
        for i in 0..dim {
            let dy = (drow[i] * gain[i]).as_f64();
            let g = rs * (dy - sum_dy / n - xh[i].as_f64() * sum_dy_xh / n);
            dx[r * dim + i] = dx[r * dim + i] + T::from_f64v(g);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu<T: Scalar>(u: T) -> T {
    let x = u.as_f64();
    T::from_f64v(0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
}

#[inline]
pub fn gelu_grad<T: Scalar>(u: T) -> T {
    let x = u.as_f64();
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    T::from_f64v(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
}

/// In-place softmax of `row[..len]`; entries past `len` are zeroed.
pub fn softmax_prefix<T: Scalar>(row: &mut [T], len: usize) {
    let max = row[..len].iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let mut sum = 0.0f64;
    for v in row[..len].iter_mut() {
        let e = (v.as_f64() - max).exp();
        sum += e;
        *v = T::from_f64v(e);
    }
    for v in row[..len].iter_mut() {
        *v = T::from_f64v(v.as_f64() / sum);
    }
    for v in row[len..].iter_mut() {
        *v = T::zero();
    }
}

/// Log-softmax of a logit row in `f64`.
pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let lse = logits.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|v| v.as_f64() - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree_with_triple_loop() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        matmul(m, k, n, &a, &b, &mut c, 0.0);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let bt = transpose(k, n, &b);
        let mut c = vec![0.0; m * n];
        matmul_bt(m, k, n, &a, &bt, &mut c, 0.0);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let at = transpose(m, k, &a);
        let mut c = vec![1.0; m * n];
        matmul_at(m, k, n, &at, &b, &mut c, 1.0);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - 1.0 - y).abs() < 1e-12));
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut row = vec![1.0f32, 2.0, 3.0, 100.0];
        softmax_prefix(&mut row, 3);
        let s: f64 = row[..3].iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert_eq!(row[3], 0.0);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
