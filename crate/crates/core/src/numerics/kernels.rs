//! Plain-slice matrix kernels used by the tape.
//!
//! Every output element is accumulated over the inner dimension in ascending
//! order, so a row of the product depends only on the matching row of the left
//! operand. Sparse expert dispatch relies on this to stay bitwise equal to the
//! dense evaluation.

/// `c[m x n] = a[m x k] * b[k x n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if n == 0 {
        return c;
    }
    for (crow, arow) in c.chunks_exact_mut(n).zip(a.chunks_exact(k.max(1))) {
        for (p, &av) in arow.iter().enumerate().take(k) {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m x n] = a[m x k] * b[n x k]^T`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}

/// `c[m x n] = a[k x m]^T * b[k x n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if n == 0 {
        return c;
    }
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (crow, &av) in c.chunks_exact_mut(n).zip(arow) {
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}
