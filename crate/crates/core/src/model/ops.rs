//! Transformer building blocks and their reverse-mode derivatives.
//!
//! Matrices are row-major. Sequences are `[seq_len, heads * head_dim]`.

use crate::error::{Error, Result};
use crate::linalg::matmul_nt;
use crate::scalar::Scalar;

/// `x / sqrt(mean(x²) + eps) ⊙ gain`.
pub fn rms_norm<S: Scalar>(x: &[S], gain: &[S], eps: S) -> Result<Vec<S>> {
    if x.len() != gain.len() {
        return Err(Error::ShapeMismatch(format!(
            "rms_norm input {} vs gain {}",
            x.len(),
            gain.len()
        )));
    }
    let mut out = vec![S::zero(); x.len()];
    rms_norm_row(x, gain, eps, &mut out);
    Ok(out)
}

/// Normalizes one row into `out`, returning the reciprocal RMS.
pub fn rms_norm_row<S: Scalar>(x: &[S], gain: &[S], eps: S, out: &mut [S]) -> S {
    let d = S::from_usize_lossy(x.len());
    let ms = x.iter().fold(S::zero(), |acc, &v| acc + v * v) / d;
    let rstd = S::one() / (ms + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * rstd * g;
    }
    rstd
}

/// Row-wise RMSNorm over `[rows, d]`; returns outputs and reciprocal RMS per row.
pub fn rms_norm_rows<S: Scalar>(x: &[S], gain: &[S], eps: S) -> (Vec<S>, Vec<S>) {
    let d = gain.len();
    let rows = x.len() / d;
    let mut out = vec![S::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        rstd.push(rms_norm_row(xr, gain, eps, or));
    }
    (out, rstd)
}

/// Backward of [`rms_norm_rows`]: accumulates into `dx` and `dgain`.
pub fn rms_norm_rows_backward<S: Scalar>(
    x: &[S],
    gain: &[S],
    rstd: &[S],
    dy: &[S],
    dx: &mut [S],
    dgain: &mut [S],
) {
    let d = gain.len();
    let inv_d = S::one() / S::from_usize_lossy(d);
    for (((xr, dyr), dxr), &r) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(rstd)
    {
        let mut dot = S::zero();
        for i in 0..d {
            dgain[i] += dyr[i] * xr[i] * r;
            dot += dyr[i] * gain[i] * xr[i];
        }
        let coef = dot * r * r * r * inv_d;
        for i in 0..d {
            dxr[i] += r * dyr[i] * gain[i] - xr[i] * coef;
        }
    }
}

/// Cosine/sine table for rotary embeddings, `[seq_len, head_dim / 2]`.
#[derive(Debug, Clone)]
pub struct RopeTable<S> {
    half: usize,
    cos: Vec<S>,
    sin: Vec<S>,
}

impl<S: Scalar> RopeTable<S> {
    pub fn new(seq_len: usize, head_dim: usize, base: f64) -> Result<Self> {
        if head_dim % 2 != 0 {
            return Err(Error::OddHeadDim(head_dim));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq_len * half);
        let mut sin = Vec::with_capacity(seq_len * half);
        for pos in 0..seq_len {
            for j in 0..half {
                let freq = base.powf(-2.0 * j as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(S::from_f64_lossy(angle.cos()));
                sin.push(S::from_f64_lossy(angle.sin()));
            }
        }
        Ok(Self { half, cos, sin })
    }

    /// Rotates every head of `x: [seq_len, heads * head_dim]` in place.
    /// `inverse` applies the transpose rotation (used by the backward pass).
    pub fn rotate(&self, x: &mut [S], width: usize, inverse: bool) {
        let hd = self.half * 2;
        for (pos, row) in x.chunks_exact_mut(width).enumerate() {
            let c = &self.cos[pos * self.half..(pos + 1) * self.half];
            let s = &self.sin[pos * self.half..(pos + 1) * self.half];
            for head in row.chunks_exact_mut(hd) {
                for j in 0..self.half {
                    let (a, b) = (head[2 * j], head[2 * j + 1]);
                    let sn = if inverse { -s[j] } else { s[j] };
                    head[2 * j] = a * c[j] - b * sn;
                    head[2 * j + 1] = a * sn + b * c[j];
                }
            }
        }
    }
}

/// Rotary embedding of head vectors.
///
/// `x` is `[positions.len(), heads * head_dim]`; row `i` is rotated by
/// angle `positions[i] · base^(−2j/head_dim)` in its `j`-th plane
/// `(2j, 2j+1)`.
pub fn rope_apply<S: Scalar>(x: &[S], positions: &[usize], head_dim: usize, base: f64) -> Result<Vec<S>> {
    if head_dim % 2 != 0 {
        return Err(Error::OddHeadDim(head_dim));
    }
    if positions.is_empty() {
        return Ok(Vec::new());
    }
    if x.len() % positions.len() != 0 || (x.len() / positions.len()) % head_dim != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} values for {} positions of head_dim {head_dim}",
            x.len(),
            positions.len()
        )));
    }
    let width = x.len() / positions.len();
    let max_pos = positions.iter().copied().max().unwrap_or(0);
    let table = RopeTable::<S>::new(max_pos + 1, head_dim, base)?;
    let mut out = x.to_vec();
    for (row, &pos) in out.chunks_exact_mut(width).zip(positions) {
        // rotate this row as if it sat at `pos`
        let half = head_dim / 2;
        let c = &table.cos[pos * half..(pos + 1) * half];
        let s = &table.sin[pos * half..(pos + 1) * half];
        for head in row.chunks_exact_mut(head_dim) {
            for j in 0..half {
                let (a, b) = (head[2 * j], head[2 * j + 1]);
                head[2 * j] = a * c[j] - b * s[j];
                head[2 * j + 1] = a * s[j] + b * c[j];
            }
        }
    }
    Ok(out)
}

/// Head layout of one attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub seq_len: usize,
    pub query_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl AttentionShape {
    pub fn q_dim(&self) -> usize {
        self.query_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    /// Key/value head serving query head `h`.
    pub fn kv_head_of(&self, h: usize) -> usize {
        h / (self.query_heads / self.kv_heads)
    }

    fn validate(&self, q_len: usize, k_len: usize, v_len: usize) -> Result<()> {
        if self.kv_heads == 0 || self.query_heads % self.kv_heads != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} query heads cannot be grouped over {} kv heads",
                self.query_heads, self.kv_heads
            )));
        }
        if q_len != self.seq_len * self.q_dim() || k_len != self.seq_len * self.kv_dim() || v_len != k_len {
            return Err(Error::ShapeMismatch(format!(
                "attention buffers q={q_len} k={k_len} v={v_len} for {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput<S> {
    /// `[seq_len, query_heads * head_dim]`
    pub context: Vec<S>,
    /// `[query_heads, seq_len, seq_len]`, zero above the diagonal.
    pub probs: Vec<S>,
}

/// Causal grouped-query attention for one sequence.
///
/// Query head `h` attends with key/value head `h / (query_heads / kv_heads)`.
/// Scores are scaled by `1/sqrt(head_dim)` and softmaxed over keys `s ≤ t`
/// after subtracting the row maximum.
pub fn causal_gqa_attention<S: Scalar>(q: &[S], k: &[S], v: &[S], shape: AttentionShape) -> Result<AttentionOutput<S>> {
    shape.validate(q.len(), k.len(), v.len())?;
    let t_len = shape.seq_len;
    let (qd, kd, hd) = (shape.q_dim() as isize, shape.kv_dim() as isize, shape.head_dim);
    let scale = S::one() / S::from_usize_lossy(hd).sqrt();
    let mut probs = vec![S::zero(); shape.query_heads * t_len * t_len];
    let mut context = vec![S::zero(); q.len()];
    for h in 0..shape.query_heads {
        let g = shape.kv_head_of(h);
        let p = &mut probs[h * t_len * t_len..(h + 1) * t_len * t_len];
        // scores = scale * q_h k_gᵀ
        S::gemm(
            t_len,
            hd,
            t_len,
            scale,
            &q[h * hd..],
            qd,
            1,
            &k[g * hd..],
            1,
            kd,
            S::zero(),
            p,
            t_len as isize,
            1,
        );
        for t in 0..t_len {
            let row = &mut p[t * t_len..(t + 1) * t_len];
            let m = row[..=t].iter().fold(S::neg_infinity(), |m, &x| if x > m { x } else { m });
            let mut total = S::zero();
            for x in row[..=t].iter_mut() {
                *x = (*x - m).exp();
                total += *x;
            }
            for x in row[..=t].iter_mut() {
                *x /= total;
            }
            row[t + 1..].fill(S::zero());
        }
        // context_h = P v_g
        S::gemm(
            t_len,
            t_len,
            hd,
            S::one(),
            p,
            t_len as isize,
            1,
            &v[g * hd..],
            kd,
            1,
            S::zero(),
            &mut context[h * hd..],
            qd,
            1,
        );
    }
    Ok(AttentionOutput { context, probs })
}

/// Backward of [`causal_gqa_attention`]; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn causal_gqa_attention_backward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    dcontext: &[S],
    shape: AttentionShape,
    dq: &mut [S],
    dk: &mut [S],
    dv: &mut [S],
) {
    let t_len = shape.seq_len;
    let (qd, kd, hd) = (shape.q_dim() as isize, shape.kv_dim() as isize, shape.head_dim);
    let scale = S::one() / S::from_usize_lossy(hd).sqrt();
    let mut dp = vec![S::zero(); t_len * t_len];
    for h in 0..shape.query_heads {
        let g = shape.kv_head_of(h);
        let p = &probs[h * t_len * t_len..(h + 1) * t_len * t_len];
        // dP = dctx_h v_gᵀ
        S::gemm(
            t_len,
            hd,
            t_len,
            S::one(),
            &dcontext[h * hd..],
            qd,
            1,
            &v[g * hd..],
            1,
            kd,
            S::zero(),
            &mut dp,
            t_len as isize,
            1,
        );
        // dv_g += Pᵀ dctx_h
        S::gemm(
            t_len,
            t_len,
            hd,
            S::one(),
            p,
            1,
            t_len as isize,
            &dcontext[h * hd..],
            qd,
            1,
            S::one(),
            &mut dv[g * hd..],
            kd,
            1,
        );
        // softmax backward, masked entries have p = 0
        for t in 0..t_len {
            let pr = &p[t * t_len..(t + 1) * t_len];
            let dr = &mut dp[t * t_len..(t + 1) * t_len];
            let inner = pr[..=t].iter().zip(&dr[..=t]).fold(S::zero(), |a, (&x, &y)| a + x * y);
            for s in 0..=t {
                dr[s] = pr[s] * (dr[s] - inner);
            }
            dr[t + 1..].fill(S::zero());
        }
        // dq_h += scale * dS k_g
        S::gemm(
            t_len,
            t_len,
            hd,
            scale,
            &dp,
            t_len as isize,
            1,
            &k[g * hd..],
            kd,
            1,
            S::one(),
            &mut dq[h * hd..],
            qd,
            1,
        );
        // dk_g += scale * dSᵀ q_h
        S::gemm(
            t_len,
            t_len,
            hd,
            scale,
            &dp,
            1,
            t_len as isize,
            &q[h * hd..],
            qd,
            1,
            S::one(),
            &mut dk[g * hd..],
            kd,
            1,
        );
    }
}

pub fn sigmoid<S: Scalar>(z: S) -> S {
    S::one() / (S::one() + (-z).exp())
}

pub fn silu<S: Scalar>(z: S) -> S {
    z * sigmoid(z)
}

/// `d silu / dz`.
pub fn silu_grad<S: Scalar>(z: S) -> S {
    let s = sigmoid(z);
    s * (S::one() + z * (S::one() - s))
}

/// `w_down · (silu(w_gate · x) ⊙ (w_up · x))` for every row of `x: [rows, d]`.
///
/// `w_gate`, `w_up` are `[mlp_dim, d]`, `w_down` is `[d, mlp_dim]`.
pub fn swiglu_mlp<S: Scalar>(x: &[S], w_gate: &[S], w_up: &[S], w_down: &[S], d: usize, mlp_dim: usize) -> Result<Vec<S>> {
    if d == 0 || x.len() % d != 0 || w_gate.len() != mlp_dim * d || w_up.len() != mlp_dim * d || w_down.len() != d * mlp_dim {
        return Err(Error::ShapeMismatch("swiglu weights do not match (d, mlp_dim)".into()));
    }
    let rows = x.len() / d;
    let mut gate = vec![S::zero(); rows * mlp_dim];
    let mut up = vec![S::zero(); rows * mlp_dim];
    matmul_nt(x, w_gate, &mut gate, rows, d, mlp_dim, S::zero());
    matmul_nt(x, w_up, &mut up, rows, d, mlp_dim, S::zero());
    let hidden: Vec<S> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
    let mut out = vec![S::zero(); rows * d];
    matmul_nt(&hidden, w_down, &mut out, rows, mlp_dim, d, S::zero());
    Ok(out)
}

/// Backward of the SwiGLU hidden activation: given `dhidden`, returns
/// `(dgate, dup)`.
pub fn swiglu_hidden_backward<S: Scalar>(gate: &[S], up: &[S], dhidden: &[S]) -> (Vec<S>, Vec<S>) {
    let mut dgate = Vec::with_capacity(gate.len());
    let mut dup = Vec::with_capacity(gate.len());
    for ((&g, &u), &dh) in gate.iter().zip(up).zip(dhidden) {
        dgate.push(dh * u * silu_grad(g));
        dup.push(dh * silu(g));
    }
    (dgate, dup)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn rms_norm_examples() {
        let ones = vec![1.0f64; 6];
        let out = rms_norm(&ones, &ones, 0.0).unwrap();
        assert!(out.iter().all(|&x| (x - 1.0).abs() < 1e-15));

        let zeros = vec![0.0f64; 4];
        assert_eq!(rms_norm(&zeros, &[1.0; 4], 1e-5).unwrap(), zeros);

        // [3,4] has mean square 12.5
        let out = rms_norm(&[3.0f64, 4.0], &[1.0, 1.0], 0.0).unwrap();
        let r = 12.5f64.sqrt();
        assert!((out[0] - 3.0 / r).abs() < 1e-15 && (out[0] - 0.848_528_137_423_857).abs() < 1e-12);
        assert!((out[1] - 4.0 / r).abs() < 1e-15 && (out[1] - 1.131_370_849_898_476).abs() < 1e-12);

        assert!(rms_norm(&[1.0f64], &[1.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn rope_identity_at_zero_and_norm_preserving() {
        let v = lcg(1, 3 * 8);
        let out = rope_apply(&v, &[0, 5, 1000], 8, 500_000.0).unwrap();
        assert_eq!(&out[..8], &v[..8]);
        for row in 0..3 {
            for pair in 0..4 {
                let a = &v[row * 8 + 2 * pair..row * 8 + 2 * pair + 2];
                let b = &out[row * 8 + 2 * pair..row * 8 + 2 * pair + 2];
                let na = a[0] * a[0] + a[1] * a[1];
                let nb = b[0] * b[0] + b[1] * b[1];
                assert!((na - nb).abs() < 1e-14);
            }
        }
        assert!(matches!(rope_apply(&v, &[0], 7, 1e4), Err(Error::OddHeadDim(7))));
    }

    #[test]
    fn rope_dot_depends_only_on_offset() {
        let q = lcg(2, 16);
        let k = lcg(3, 16);
        let dot_at = |p1: usize, p2: usize| {
            let rq = rope_apply(&q, &[p1], 16, 10_000.0).unwrap();
            let rk = rope_apply(&k, &[p2], 16, 10_000.0).unwrap();
            rq.iter().zip(&rk).map(|(a, b)| a * b).sum::<f64>()
        };
        let base = dot_at(7, 3);
        for shift in [1usize, 10, 100, 250] {
            assert!((dot_at(7 + shift, 3 + shift) - base).abs() < 1e-10);
        }
        assert!((dot_at(8, 3) - base).abs() > 1e-6);
    }

    #[test]
    fn rope_table_matches_rope_apply_and_inverts() {
        let (t, heads, hd) = (5, 3, 4);
        let x = lcg(9, t * heads * hd);
        let table = RopeTable::<f64>::new(t, hd, 500_000.0).unwrap();
        let mut y = x.clone();
        table.rotate(&mut y, heads * hd, false);
        let expected = rope_apply(&x, &[0, 1, 2, 3, 4], hd, 500_000.0).unwrap();
        assert_eq!(y, expected);
        table.rotate(&mut y, heads * hd, true);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn single_position_attention_returns_value() {
        let shape = AttentionShape {
            seq_len: 1,
            query_heads: 2,
            kv_heads: 1,
            head_dim: 4,
        };
        let q = lcg(4, 8);
        let k = lcg(5, 4);
        let v = lcg(6, 4);
        let out = causal_gqa_attention(&q, &k, &v, shape).unwrap();
        assert_eq!(&out.context[..4], &v[..]);
        assert_eq!(&out.context[4..], &v[..]);
    }

    #[test]
    fn attention_rows_are_stochastic_and_causal() {
        let shape = AttentionShape {
            seq_len: 6,
            query_heads: 4,
            kv_heads: 2,
            head_dim: 4,
        };
        let q = lcg(7, 6 * 16);
        let k = lcg(8, 6 * 8);
        let v = lcg(9, 6 * 8);
        let out = causal_gqa_attention(&q, &k, &v, shape).unwrap();
        for h in 0..4 {
            for t in 0..6 {
                let row = &out.probs[(h * 6 + t) * 6..(h * 6 + t + 1) * 6];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
                assert!(row[t + 1..].iter().all(|&p| p == 0.0));
            }
        }
        assert!(causal_gqa_attention(&q, &k[..8], &v, shape).is_err());
    }

    #[test]
    fn grouped_attention_with_equal_heads_is_multi_head() {
        // full multi-head attention written out per head
        let (t_len, heads, hd) = (5, 3, 4);
        let shape = AttentionShape {
            seq_len: t_len,
            query_heads: heads,
            kv_heads: heads,
            head_dim: hd,
        };
        let w = heads * hd;
        let q = lcg(10, t_len * w);
        let k = lcg(11, t_len * w);
        let v = lcg(12, t_len * w);
        let out = causal_gqa_attention(&q, &k, &v, shape).unwrap();
        for h in 0..heads {
            for t in 0..t_len {
                let scores: Vec<f64> = (0..=t)
                    .map(|s| (0..hd).map(|i| q[t * w + h * hd + i] * k[s * w + h * hd + i]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for i in 0..hd {
                    let e: f64 = (0..=t).map(|s| (scores[s] - m).exp() / z * v[s * w + h * hd + i]).sum();
                    assert!((out.context[t * w + h * hd + i] - e).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn swiglu_examples() {
        let (d, m) = (2, 2);
        let zeros = swiglu_mlp(&[0.0f64, 0.0], &[1.0, 2.0, 3.0, 4.0], &[1.0; 4], &[1.0; 4], d, m).unwrap();
        assert_eq!(zeros, vec![0.0, 0.0]);

        // hand computation: x = [1, -1]
        let x = [1.0f64, -1.0];
        let wg = [0.5, 0.25, -1.0, 2.0];
        let wu = [1.0, 1.0, 2.0, -1.0];
        let wd = [1.0, 0.0, 0.5, -2.0];
        let g = [0.25f64, -3.0];
        let u = [0.0f64, 3.0];
        let hid = [g[0] / (1.0 + (-g[0]).exp()) * u[0], g[1] / (1.0 + (-g[1]).exp()) * u[1]];
        let expected = [hid[0], 0.5 * hid[0] - 2.0 * hid[1]];
        let got = swiglu_mlp(&x, &wg, &wu, &wd, d, m).unwrap();
        for (a, b) in got.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }

        // a huge positive gate pre-activation makes the gate the identity
        let big = swiglu_mlp(&[1.0f64], &[1e3], &[0.7], &[1.0], 1, 1).unwrap();
        assert!((big[0] - 1e3 * 0.7).abs() < 1e-9);
    }

    #[test]
    fn silu_grad_matches_difference_quotient() {
        for &z in &[-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(z + h) - silu(z - h)) / (2.0 * h);
            assert!((fd - silu_grad(z)).abs() < 1e-9);
        }
    }
}
