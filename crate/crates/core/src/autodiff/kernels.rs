//! Row-major dense kernels used by the tape. Loop order is fixed so results
//! are bitwise reproducible.

/// `a [n x p] * b [p x q]`
pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * q];
    for i in 0..n {
        let row = &mut out[i * q..(i + 1) * q];
        for k in 0..p {
            let aik = a[i * p + k];
            let brow = &b[k * q..(k + 1) * q];
            row.iter_mut().zip(brow).for_each(|(o, b)| *o += aik * b);
        }
    }
    out
}

/// `g [n x q] * b^T` where `b` is `[p x q]`; result `[n x p]`.
pub(crate) fn matmul_a_bt(g: &[f64], b: &[f64], n: usize, q: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        let grow = &g[i * q..(i + 1) * q];
        for k in 0..p {
            let brow = &b[k * q..(k + 1) * q];
            out[i * p + k] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T * g` where `a` is `[n x p]` and `g` is `[n x q]`; result `[p x q]`.
pub(crate) fn matmul_at_b(a: &[f64], g: &[f64], n: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    for i in 0..n {
        let grow = &g[i * q..(i + 1) * q];
        for k in 0..p {
            let aik = a[i * p + k];
            let orow = &mut out[k * q..(k + 1) * q];
            orow.iter_mut().zip(grow).for_each(|(o, g)| *o += aik * g);
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Writes `softmax(row)` into `out` and returns `logsumexp(row)`.
pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        denom += *o;
    }
    out.iter_mut().for_each(|o| *o /= denom);
    max + denom.ln()
}
