//! Dense kernels backing the graph operations. All buffers are row-major.

use crate::scalar::Scalar;

/// `out += a · b` with `a: (m, k)`, `b: (k, n)`, `out: (m, n)`.
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Transpose of a `(rows, cols)` matrix.
pub fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `a · bᵀ` with `a: (m, k)`, `b: (n, k)`.
pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let bt = transpose(b, n, k);
    let mut out = vec![S::zero(); m * n];
    matmul_acc(a, &bt, m, k, n, &mut out);
    out
}

/// `aᵀ · b` with `a: (k, m)`, `b: (k, n)`.
pub fn matmul_tn<S: Scalar>(a: &[S], b: &[S], k: usize, m: usize, n: usize) -> Vec<S> {
    let at = transpose(a, k, m);
    let mut out = vec![S::zero(); m * n];
    matmul_acc(&at, b, m, k, n, &mut out);
    out
}

pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    let half = S::lit(0.5);
    let inner = S::lit(GELU_C) * (x + S::lit(GELU_A) * x * x * x);
    half * x * (S::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::lit(0.5);
    let inner = S::lit(GELU_C) * (x + S::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = S::lit(GELU_C) * (S::one() + S::lit(3.0 * GELU_A) * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * dinner
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_row<S: Scalar>(x: &[S], out: &mut [S]) {
    let max = x.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn logsumexp_row<S: Scalar>(x: &[S]) -> S {
    let max = x.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let sum: S = x.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Backward of a softmax row given its output `y` and upstream `dy`:
/// `dx = y ⊙ (dy - <dy, y>)`, accumulated into `dx`.
pub fn softmax_row_backward_acc<S: Scalar>(y: &[S], dy: &[S], scale: S, dx: &mut [S]) {
    let dot: S = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    for ((d, &yv), &g) in dx.iter_mut().zip(y).zip(dy) {
        *d += scale * yv * (g - dot);
    }
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Index of the first maximum.
pub fn argmax<S: Scalar>(x: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}
