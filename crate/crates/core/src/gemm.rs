//! Strided single-precision matrix multiply.

/// `c = alpha * a · b + beta * c` with `a` m×k, `b` k×n and `c` m×n
/// (unit column stride for `c`). Strides are in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * rsc..i * rsc + n] {
                *v *= beta;
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    assert!((m - 1) * rsc + n - 1 < c.len(), "gemm: output out of bounds");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::gemm;

    #[test]
    fn small_product_and_transpose_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, 2, 1, &b, 2, 1, 0.0, &mut c, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // aᵀ · b via strides
        gemm(2, 2, 2, 1.0, &a, 1, 2, &b, 2, 1, 0.0, &mut c, 2);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        // accumulate
        gemm(2, 2, 2, 1.0, &a, 1, 2, &b, 2, 1, 1.0, &mut c, 2);
        assert_eq!(c, [52.0, 60.0, 76.0, 88.0]);
    }
}
