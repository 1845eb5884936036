//! Dense kernels shared by the tape: gemm, Cholesky, triangular solves.

use super::{dim_err, Tensor, TensorError};

/// `op(a) · op(b)` where `op` optionally transposes a row-major matrix.
pub(crate) fn matmul(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor, TensorError> {
    if !a.is_matrix() || !b.is_matrix() {
        return Err(dim_err(
            "matmul",
            format!("expected matrices, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k) = if ta { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
    let (k2, n) = if tb { (b.cols(), b.rows()) } else { (b.rows(), b.cols()) };
    if k != k2 {
        return Err(dim_err(
            "matmul",
            format!("inner dimensions {k} and {k2} (shapes {:?}, {:?})", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(1.0, a, ta, b, tb, &mut out);
    Ok(Tensor::new(vec![m, n], out).expect("gemm output shape"))
}

/// `c += alpha · op(a) · op(b)`; shapes must already agree.
pub(crate) fn gemm_acc(alpha: f64, a: &Tensor, ta: bool, b: &Tensor, tb: bool, c: &mut [f64]) {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    assert_eq!(c.len(), m * n);
    assert_eq!(if tb { bc } else { br }, k);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    // SAFETY: the strides describe exactly the buffers of `a`, `b` and `c`,
    // whose lengths were checked against (m, k, n) above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lower Cholesky factor of the row-major `n × n` matrix `a`.
///
/// On failure reports the smallest pivot encountered and where.
pub fn cholesky_lower(a: &[f64], n: usize) -> Result<Vec<f64>, TensorError> {
    let mut l = vec![0.0; n * n];
    let mut min_pivot = f64::INFINITY;
    let mut min_index = 0;
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d < min_pivot {
            min_pivot = d;
            min_index = j;
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(TensorError::NotPositiveDefinite {
                pivot: min_pivot,
                index: min_index,
            });
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `L X = B` (or `Lᵀ X = B` when `trans`) in place; `b` is `n × cols`.
pub fn solve_lower_in_place(l: &[f64], n: usize, b: &mut [f64], cols: usize, trans: bool) {
    debug_assert_eq!(l.len(), n * n);
    debug_assert_eq!(b.len(), n * cols);
    if !trans {
        for i in 0..n {
            for k in 0..i {
                let lik = l[i * n + k];
                if lik != 0.0 {
                    let (head, tail) = b.split_at_mut(i * cols);
                    let src = &head[k * cols..(k + 1) * cols];
                    for (dst, s) in tail[..cols].iter_mut().zip(src) {
                        *dst -= lik * s;
                    }
                }
            }
            let inv = 1.0 / l[i * n + i];
            for v in &mut b[i * cols..(i + 1) * cols] {
                *v *= inv;
            }
        }
    } else {
        for i in (0..n).rev() {
            for k in i + 1..n {
                let lki = l[k * n + i];
                if lki != 0.0 {
                    let (head, tail) = b.split_at_mut(k * cols);
                    let dst = &mut head[i * cols..(i + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(&tail[..cols]) {
                        *d -= lki * s;
                    }
                }
            }
            let inv = 1.0 / l[i * n + i];
            for v in &mut b[i * cols..(i + 1) * cols] {
                *v *= inv;
            }
        }
    }
}
