//! Row-major dense kernels used by the transformer.
//!
//! Weights are stored `[out, in]`, so a linear layer is `y = x · Wᵀ`.

use crate::scalar::Scalar;

/// `y = x · wᵀ` (+ `beta * y`), x: `[m, k]`, w: `[n, k]`, y: `[m, n]`.
pub fn matmul_nt<S: Scalar>(x: &[S], w: &[S], y: &mut [S], m: usize, k: usize, n: usize, beta: S) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(w.len(), n * k);
    debug_assert_eq!(y.len(), m * n);
    S::gemm(m, k, n, S::one(), x, k as isize, 1, w, 1, k as isize, beta, y, n as isize, 1);
}

/// `dx (+)= dy · w`, dy: `[m, n]`, w: `[n, k]`, dx: `[m, k]`.
pub fn matmul_nn<S: Scalar>(dy: &[S], w: &[S], dx: &mut [S], m: usize, n: usize, k: usize, beta: S) {
    debug_assert_eq!(dy.len(), m * n);
    debug_assert_eq!(w.len(), n * k);
    debug_assert_eq!(dx.len(), m * k);
    S::gemm(m, n, k, S::one(), dy, n as isize, 1, w, k as isize, 1, beta, dx, k as isize, 1);
}

/// `dw (+)= dyᵀ · x`, dy: `[m, n]`, x: `[m, k]`, dw: `[n, k]`.
pub fn matmul_tn<S: Scalar>(dy: &[S], x: &[S], dw: &mut [S], m: usize, n: usize, k: usize, beta: S) {
    debug_assert_eq!(dy.len(), m * n);
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(dw.len(), n * k);
    S::gemm(n, m, k, S::one(), dy, 1, n as isize, x, k as isize, 1, beta, dw, k as isize, 1);
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Squared Euclidean norm accumulated in `f64`.
pub fn sum_squares_f64<S: Scalar>(v: &[S]) -> f64 {
    v.iter()
        .map(|x| {
            let x = x.to_f64_lossy();
            x * x
        })
        .sum()
}
