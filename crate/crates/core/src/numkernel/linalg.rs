/// `c = beta·c + op(a)·op(b)` for row-major buffers, where `op(a)` is
/// `[m × inner]` and `op(b)` is `[inner × n]`. A transposed operand is
/// stored in the layout of its transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    inner: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * inner, "gemm: lhs buffer");
    assert_eq!(b.len(), inner * n, "gemm: rhs buffer");
    assert_eq!(c.len(), m * n, "gemm: output buffer");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m) } else { (inner, 1) };
    let (rsb, csb) = if b_transposed { (1, inner) } else { (n, 1) };
    // SAFETY: the asserts above bound every index dgemm touches given
    // these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            inner,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
