#![allow(dead_code)]

pub mod records;

use kdlab::model::{ModelConfig, ParameterSet};

/// Small deterministic generator for test fixtures.
pub struct XorShift(u64);

impl XorShift {
    pub fn new(seed: u64) -> Self {
        Self(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1)
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }

    /// Uniform in [-1, 1).
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}

pub fn tiny_config(d: usize, vocab: usize, context: usize) -> ModelConfig {
    ModelConfig {
        hidden_dim: d,
        num_layers: 1,
        mlp_dim: 2 * d,
        query_heads: 2,
        kv_heads: 1,
        head_dim: 4,
        vocab_size: vocab,
        rope_base: 10_000.0,
        norm_eps: 1e-5,
        context_len: context,
    }
}

/// Parameters with larger-than-default spread so every path carries signal.
pub fn spread_params(cfg: &ModelConfig, seed: u64) -> ParameterSet<f64> {
    let mut p = ParameterSet::<f64>::init(cfg, seed).unwrap();
    let mut rng = XorShift::new(seed ^ 0xabcdef);
    for x in p.as_mut_slice() {
        *x += 0.3 * rng.unit();
    }
    p
}

fn get<'a>(p: &'a ParameterSet<f64>, name: &str) -> &'a [f64] {
    p.tensor(name).unwrap_or_else(|| panic!("missing {name}"))
}

fn matvec(w: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows).map(|r| (0..cols).map(|c| w[r * cols + c] * x[c]).sum()).collect()
}

fn rmsnorm(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + eps).sqrt();
    x.iter().zip(g).map(|(v, g)| v * r * g).collect()
}

fn rotate(v: &mut [f64], pos: usize, head_dim: usize, base: f64) {
    for head in v.chunks_mut(head_dim) {
        for j in 0..head_dim / 2 {
            let theta = pos as f64 * base.powf(-2.0 * j as f64 / head_dim as f64);
            let (c, s) = (theta.cos(), theta.sin());
            let (a, b) = (head[2 * j], head[2 * j + 1]);
            head[2 * j] = a * c - b * s;
            head[2 * j + 1] = a * s + b * c;
        }
    }
}

/// Position-by-position re-implementation of the forward pass for one
/// sequence, written with scalar loops only.
pub fn reference_logits(p: &ParameterSet<f64>, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = p.config().clone();
    let (d, hd) = (cfg.hidden_dim, cfg.head_dim);
    let group = cfg.query_heads / cfg.kv_heads;
    let t_len = tokens.len();
    let embed = get(p, "tok_embed");
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| embed[t as usize * d..(t as usize + 1) * d].to_vec())
        .collect();
    for l in 0..cfg.num_layers {
        let name = |s: &str| format!("layers.{l}.{s}");
        let normed: Vec<Vec<f64>> = xs.iter().map(|x| rmsnorm(x, get(p, &name("attn_norm")), cfg.norm_eps)).collect();
        let mut qs = Vec::new();
        let mut ks = Vec::new();
        let mut vs = Vec::new();
        for (pos, a) in normed.iter().enumerate() {
            let mut q = matvec(get(p, &name("wq")), a, cfg.q_dim());
            let mut k = matvec(get(p, &name("wk")), a, cfg.kv_dim());
            rotate(&mut q, pos, hd, cfg.rope_base);
            rotate(&mut k, pos, hd, cfg.rope_base);
            qs.push(q);
            ks.push(k);
            vs.push(matvec(get(p, &name("wv")), a, cfg.kv_dim()));
        }
        let mut next = Vec::new();
        for t in 0..t_len {
            let mut ctx = vec![0.0; cfg.q_dim()];
            for h in 0..cfg.query_heads {
                let g = h / group;
                let scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        (0..hd).map(|i| qs[t][h * hd + i] * ks[s][g * hd + i]).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for s in 0..=t {
                    let w = scores[s].exp() / z;
                    for i in 0..hd {
                        ctx[h * hd + i] += w * vs[s][g * hd + i];
                    }
                }
            }
            let attn = matvec(get(p, &name("wo")), &ctx, d);
            let mid: Vec<f64> = xs[t].iter().zip(&attn).map(|(a, b)| a + b).collect();
            let b = rmsnorm(&mid, get(p, &name("mlp_norm")), cfg.norm_eps);
            let gate = matvec(get(p, &name("w_gate")), &b, cfg.mlp_dim);
            let up = matvec(get(p, &name("w_up")), &b, cfg.mlp_dim);
            let hidden: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            let down = matvec(get(p, &name("w_down")), &hidden, d);
            next.push(mid.iter().zip(&down).map(|(a, b)| a + b).collect());
        }
        xs = next;
    }
    xs.iter()
        .map(|x| {
            let f = rmsnorm(x, get(p, "final_norm"), cfg.norm_eps);
            matvec(get(p, "lm_head"), &f, cfg.vocab_size)
        })
        .collect()
}
