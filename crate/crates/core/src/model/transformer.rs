//! Forward pass and hand-written reverse-mode gradients of the
//! pre-norm decoder: RMSNorm → GQA attention with RoPE → residual,
//! RMSNorm → SwiGLU → residual, final RMSNorm, untied output head.

use super::config::ModelConfig;
use super::ops::{
    causal_gqa_attention, causal_gqa_attention_backward, rms_norm_rows, rms_norm_rows_backward, silu,
    swiglu_hidden_backward, AttentionShape, RopeTable,
};
use super::params::{GradientSet, ParameterSet};
use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::linalg::{matmul_nn, matmul_nt, matmul_tn};
use crate::losses::{LossBreakdown, Objective};
use crate::scalar::Scalar;

struct LayerCache<S> {
    x_in: Vec<S>,
    attn_norm_out: Vec<S>,
    attn_rstd: Vec<S>,
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    probs: Vec<S>,
    context: Vec<S>,
    x_mid: Vec<S>,
    mlp_norm_out: Vec<S>,
    mlp_rstd: Vec<S>,
    gate: Vec<S>,
    up: Vec<S>,
    hidden: Vec<S>,
}

/// Activations retained for the backward pass.
pub struct ForwardCache<S> {
    batch: usize,
    seq_len: usize,
    inputs: Vec<u32>,
    layers: Vec<LayerCache<S>>,
    x_out: Vec<S>,
    final_norm_out: Vec<S>,
    final_rstd: Vec<S>,
    rope: RopeTable<S>,
    /// `[batch * seq_len, vocab]`
    pub logits: Vec<S>,
}

fn check_inputs(cfg: &ModelConfig, inputs: &[u32], batch: usize, seq_len: usize) -> Result<()> {
    if inputs.len() != batch * seq_len {
        return Err(Error::ShapeMismatch(format!(
            "{} tokens for batch {batch} x seq_len {seq_len}",
            inputs.len()
        )));
    }
    if seq_len > cfg.context_len {
        return Err(Error::ContextOverflow {
            len: seq_len,
            max: cfg.context_len,
        });
    }
    if let Some(&id) = inputs.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::IdOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Runs the model over `inputs: [batch, seq_len]` and keeps activations.
pub fn forward_with_cache<S: Scalar>(
    params: &ParameterSet<S>,
    inputs: &[u32],
    batch: usize,
    seq_len: usize,
) -> Result<ForwardCache<S>> {
    let cfg = params.config();
    check_inputs(cfg, inputs, batch, seq_len)?;
    let w = params.as_slice();
    let lay = params.layout();
    let (d, m, v) = (cfg.hidden_dim, cfg.mlp_dim, cfg.vocab_size);
    let (qd, kd) = (cfg.q_dim(), cfg.kv_dim());
    let n = batch * seq_len;
    let eps = S::from_f64_lossy(cfg.norm_eps);
    let rope = RopeTable::new(seq_len, cfg.head_dim, cfg.rope_base)?;
    let shape = AttentionShape {
        seq_len,
        query_heads: cfg.query_heads,
        kv_heads: cfg.kv_heads,
        head_dim: cfg.head_dim,
    };

    let embed = &w[lay.tok_embed.clone()];
    let mut x = Vec::with_capacity(n * d);
    for &t in inputs {
        x.extend_from_slice(&embed[t as usize * d..(t as usize + 1) * d]);
    }

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for lr in &lay.layers {
        let (a, a_rstd) = rms_norm_rows(&x, &w[lr.attn_norm.clone()], eps);
        let mut q = vec![S::zero(); n * qd];
        let mut k = vec![S::zero(); n * kd];
        let mut vv = vec![S::zero(); n * kd];
        matmul_nt(&a, &w[lr.wq.clone()], &mut q, n, d, qd, S::zero());
        matmul_nt(&a, &w[lr.wk.clone()], &mut k, n, d, kd, S::zero());
        matmul_nt(&a, &w[lr.wv.clone()], &mut vv, n, d, kd, S::zero());
        let mut context = vec![S::zero(); n * qd];
        let mut probs = Vec::with_capacity(batch * cfg.query_heads * seq_len * seq_len);
        for b in 0..batch {
            let qs = &mut q[b * seq_len * qd..(b + 1) * seq_len * qd];
            rope.rotate(qs, qd, false);
            let ks = &mut k[b * seq_len * kd..(b + 1) * seq_len * kd];
            rope.rotate(ks, kd, false);
            let out = causal_gqa_attention(
                &q[b * seq_len * qd..(b + 1) * seq_len * qd],
                &k[b * seq_len * kd..(b + 1) * seq_len * kd],
                &vv[b * seq_len * kd..(b + 1) * seq_len * kd],
                shape,
            )?;
            context[b * seq_len * qd..(b + 1) * seq_len * qd].copy_from_slice(&out.context);
            probs.extend_from_slice(&out.probs);
        }
        let mut x_mid = x.clone();
        matmul_nt(&context, &w[lr.wo.clone()], &mut x_mid, n, qd, d, S::one());

        let (bn, b_rstd) = rms_norm_rows(&x_mid, &w[lr.mlp_norm.clone()], eps);
        let mut gate = vec![S::zero(); n * m];
        let mut up = vec![S::zero(); n * m];
        matmul_nt(&bn, &w[lr.w_gate.clone()], &mut gate, n, d, m, S::zero());
        matmul_nt(&bn, &w[lr.w_up.clone()], &mut up, n, d, m, S::zero());
        let hidden: Vec<S> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
        let mut x_next = x_mid.clone();
        matmul_nt(&hidden, &w[lr.w_down.clone()], &mut x_next, n, m, d, S::one());

        layers.push(LayerCache {
            x_in: std::mem::replace(&mut x, x_next),
            attn_norm_out: a,
            attn_rstd: a_rstd,
            q,
            k,
            v: vv,
            probs,
            context,
            x_mid,
            mlp_norm_out: bn,
            mlp_rstd: b_rstd,
            gate,
            up,
            hidden,
        });
    }

    let (f, f_rstd) = rms_norm_rows(&x, &w[lay.final_norm.clone()], eps);
    let mut logits = vec![S::zero(); n * v];
    matmul_nt(&f, &w[lay.lm_head.clone()], &mut logits, n, d, v, S::zero());
    Ok(ForwardCache {
        batch,
        seq_len,
        inputs: inputs.to_vec(),
        layers,
        x_out: x,
        final_norm_out: f,
        final_rstd: f_rstd,
        rope,
        logits,
    })
}

/// Next-token logits `[batch, seq_len, vocab]` for `inputs: [batch, seq_len]`.
pub fn forward_logits<S: Scalar>(params: &ParameterSet<S>, inputs: &[u32], batch: usize, seq_len: usize) -> Result<Vec<S>> {
    Ok(forward_with_cache(params, inputs, batch, seq_len)?.logits)
}

/// Backpropagates `dlogits` through a cached forward pass.
pub fn backward<S: Scalar>(params: &ParameterSet<S>, cache: &ForwardCache<S>, dlogits: &[S]) -> Result<GradientSet<S>> {
    let cfg = params.config();
    let (d, m, v) = (cfg.hidden_dim, cfg.mlp_dim, cfg.vocab_size);
    let (qd, kd) = (cfg.q_dim(), cfg.kv_dim());
    let (batch, seq_len) = (cache.batch, cache.seq_len);
    let n = batch * seq_len;
    if dlogits.len() != n * v {
        return Err(Error::ShapeMismatch(format!("dlogits has {} values, expected {}", dlogits.len(), n * v)));
    }
    let w = params.as_slice();
    let lay = params.layout();
    let mut grads = params.zeros_like();
    let g = grads.as_mut_slice();
    let shape = AttentionShape {
        seq_len,
        query_heads: cfg.query_heads,
        kv_heads: cfg.kv_heads,
        head_dim: cfg.head_dim,
    };

    matmul_tn(dlogits, &cache.final_norm_out, &mut g[lay.lm_head.clone()], n, v, d, S::one());
    let mut df = vec![S::zero(); n * d];
    matmul_nn(dlogits, &w[lay.lm_head.clone()], &mut df, n, v, d, S::zero());
    let mut dx = vec![S::zero(); n * d];
    rms_norm_rows_backward(
        &cache.x_out,
        &w[lay.final_norm.clone()],
        &cache.final_rstd,
        &df,
        &mut dx,
        &mut g[lay.final_norm.clone()],
    );

    for (lr, lc) in lay.layers.iter().zip(&cache.layers).rev() {
        // MLP block: x_out = x_mid + hidden · w_downᵀ
        matmul_tn(&dx, &lc.hidden, &mut g[lr.w_down.clone()], n, d, m, S::one());
        let mut dhidden = vec![S::zero(); n * m];
        matmul_nn(&dx, &w[lr.w_down.clone()], &mut dhidden, n, d, m, S::zero());
        let (dgate, dup) = swiglu_hidden_backward(&lc.gate, &lc.up, &dhidden);
        matmul_tn(&dgate, &lc.mlp_norm_out, &mut g[lr.w_gate.clone()], n, m, d, S::one());
        matmul_tn(&dup, &lc.mlp_norm_out, &mut g[lr.w_up.clone()], n, m, d, S::one());
        let mut dbn = vec![S::zero(); n * d];
        matmul_nn(&dgate, &w[lr.w_gate.clone()], &mut dbn, n, m, d, S::zero());
        matmul_nn(&dup, &w[lr.w_up.clone()], &mut dbn, n, m, d, S::one());
        let mut dx_mid = dx;
        rms_norm_rows_backward(
            &lc.x_mid,
            &w[lr.mlp_norm.clone()],
            &lc.mlp_rstd,
            &dbn,
            &mut dx_mid,
            &mut g[lr.mlp_norm.clone()],
        );

        // attention block: x_mid = x_in + context · woᵀ
        matmul_tn(&dx_mid, &lc.context, &mut g[lr.wo.clone()], n, d, qd, S::one());
        let mut dcontext = vec![S::zero(); n * qd];
        matmul_nn(&dx_mid, &w[lr.wo.clone()], &mut dcontext, n, d, qd, S::zero());
        let mut dq = vec![S::zero(); n * qd];
        let mut dk = vec![S::zero(); n * kd];
        let mut dv = vec![S::zero(); n * kd];
        let probs_per_seq = cfg.query_heads * seq_len * seq_len;
        for b in 0..batch {
            let qs = b * seq_len * qd..(b + 1) * seq_len * qd;
            let ks = b * seq_len * kd..(b + 1) * seq_len * kd;
            causal_gqa_attention_backward(
                &lc.q[qs.clone()],
                &lc.k[ks.clone()],
                &lc.v[ks.clone()],
                &lc.probs[b * probs_per_seq..(b + 1) * probs_per_seq],
                &dcontext[qs.clone()],
                shape,
                &mut dq[qs.clone()],
                &mut dk[ks.clone()],
                &mut dv[ks.clone()],
            );
            cache.rope.rotate(&mut dq[qs], qd, true);
            cache.rope.rotate(&mut dk[ks], kd, true);
        }
        matmul_tn(&dq, &lc.attn_norm_out, &mut g[lr.wq.clone()], n, qd, d, S::one());
        matmul_tn(&dk, &lc.attn_norm_out, &mut g[lr.wk.clone()], n, kd, d, S::one());
        matmul_tn(&dv, &lc.attn_norm_out, &mut g[lr.wv.clone()], n, kd, d, S::one());
        let mut da = vec![S::zero(); n * d];
        matmul_nn(&dq, &w[lr.wq.clone()], &mut da, n, qd, d, S::zero());
        matmul_nn(&dk, &w[lr.wk.clone()], &mut da, n, kd, d, S::one());
        matmul_nn(&dv, &w[lr.wv.clone()], &mut da, n, kd, d, S::one());
        let mut dx_in = dx_mid;
        rms_norm_rows_backward(
            &lc.x_in,
            &w[lr.attn_norm.clone()],
            &lc.attn_rstd,
            &da,
            &mut dx_in,
            &mut g[lr.attn_norm.clone()],
        );
        dx = dx_in;
    }

    let embed_grad = &mut g[lay.tok_embed.clone()];
    for (row, &t) in dx.chunks_exact(d).zip(&cache.inputs) {
        let dst = &mut embed_grad[t as usize * d..(t as usize + 1) * d];
        for (a, &b) in dst.iter_mut().zip(row) {
            *a += b;
        }
    }
    Ok(grads)
}

/// Loss of `objective` on `batch` and its exact gradient with respect to
/// every parameter.
pub fn loss_and_grads<S: Scalar, O: Objective<S> + ?Sized>(
    params: &ParameterSet<S>,
    batch: &Batch,
    objective: &O,
) -> Result<(LossBreakdown<S>, GradientSet<S>)> {
    let cache = forward_with_cache(params, &batch.inputs, batch.batch_size, batch.context_len)?;
    let breakdown = objective.evaluate(&cache.logits, &batch.targets, params.config().vocab_size)?;
    let loss = breakdown.loss.to_f64_lossy();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(loss));
    }
    let grads = backward(params, &cache, &breakdown.dlogits)?;
    Ok((breakdown, grads))
}
