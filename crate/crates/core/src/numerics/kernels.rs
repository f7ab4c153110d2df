//! Raw slice kernels shared by the tape and the decode path.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands described by
/// explicit strides.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: every operand is addressed strictly inside its slice given the
    // (m, k, n) extents and the strides passed by the wrappers below.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    sgemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), 0.0, &mut c);
    c
}

/// `a[m×k] · b[n×k]ᵀ`, the shape of a linear layer with `[out×in]` weights.
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    sgemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), 0.0, &mut c);
    c
}

/// `c += a[m×k] · b[k×n]`.
pub fn matmul_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    sgemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), 1.0, c);
}

/// `c += a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn_acc(a: &[f32], b: &[f32], k: usize, m: usize, n: usize, c: &mut [f32]) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    sgemm(m, k, n, a, (1, m as isize), b, (n as isize, 1), 1.0, c);
}

/// `c += a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    sgemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), 1.0, c);
}

/// `w[out×in] · x[in]` with a 64-bit accumulator, used on the decode path.
pub fn matvec(w: &[f32], x: &[f32], out: usize) -> Vec<f32> {
    let inp = x.len();
    assert_eq!(w.len(), out * inp);
    w.chunks_exact(inp).map(|row| dot(row, x) as f32).collect()
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        (x as f64).exp().ln_1p() as f32
    }
}
