//! Flat parameter storage with a named layout derived from [`ModelConfig`].

use std::ops::Range;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Embedding,
    Projection,
    /// Projections writing into the residual stream.
    ResidualProjection,
    NormGain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: TensorKind,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRanges {
    pub attn_norm: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub mlp_norm: Range<usize>,
    pub w_gate: Range<usize>,
    pub w_up: Range<usize>,
    pub w_down: Range<usize>,
}

/// Names, shapes and offsets of every tensor in a flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub tok_embed: Range<usize>,
    pub layers: Vec<LayerRanges>,
    pub final_norm: Range<usize>,
    pub lm_head: Range<usize>,
    pub total: usize,
}

impl Layout {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, shape: Vec<usize>, kind: TensorKind| -> Range<usize> {
            let spec = TensorSpec {
                name,
                shape,
                offset,
                kind,
            };
            let r = spec.range();
            offset = r.end;
            tensors.push(spec);
            r
        };
        let (d, m, v) = (cfg.hidden_dim, cfg.mlp_dim, cfg.vocab_size);
        let (qd, kd) = (cfg.q_dim(), cfg.kv_dim());
        let tok_embed = push("tok_embed".into(), vec![v, d], TensorKind::Embedding);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let p = |s: &str| format!("layers.{i}.{s}");
            layers.push(LayerRanges {
                attn_norm: push(p("attn_norm"), vec![d], TensorKind::NormGain),
                wq: push(p("wq"), vec![qd, d], TensorKind::Projection),
                wk: push(p("wk"), vec![kd, d], TensorKind::Projection),
                wv: push(p("wv"), vec![kd, d], TensorKind::Projection),
                wo: push(p("wo"), vec![d, qd], TensorKind::ResidualProjection),
                mlp_norm: push(p("mlp_norm"), vec![d], TensorKind::NormGain),
                w_gate: push(p("w_gate"), vec![m, d], TensorKind::Projection),
                w_up: push(p("w_up"), vec![m, d], TensorKind::Projection),
                w_down: push(p("w_down"), vec![d, m], TensorKind::ResidualProjection),
            });
        }
        let final_norm = push("final_norm".into(), vec![d], TensorKind::NormGain);
        let lm_head = push("lm_head".into(), vec![v, d], TensorKind::Projection);
        Self {
            tensors,
            tok_embed,
            layers,
            final_norm,
            lm_head,
            total: offset,
        }
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Learnable parameters of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<S> {
    config: ModelConfig,
    layout: Arc<Layout>,
    data: Vec<S>,
}

/// Gradient buffer congruent with a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<S> {
    layout: Arc<Layout>,
    data: Vec<S>,
}

impl<S: Scalar> ParameterSet<S> {
    pub fn from_flat(config: ModelConfig, data: Vec<S>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::for_config(&config);
        if data.len() != layout.total {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a layout of {}",
                data.len(),
                layout.total
            )));
        }
        Ok(Self {
            config,
            layout: Arc::new(layout),
            data,
        })
    }

    /// Normal(0, 0.02) weights, residual-output projections scaled by
    /// `1/sqrt(2 * num_layers)`, norm gains at one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::for_config(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let residual_scale = 1.0 / (2.0 * config.num_layers as f64).sqrt();
        let mut data = vec![S::zero(); layout.total];
        for spec in &layout.tensors {
            let slot = &mut data[spec.range()];
            match spec.kind {
                TensorKind::NormGain => slot.fill(S::one()),
                TensorKind::Embedding | TensorKind::Projection => {
                    for x in slot.iter_mut() {
                        *x = S::from_f64_lossy(normal.sample(&mut rng));
                    }
                }
                TensorKind::ResidualProjection => {
                    for x in slot.iter_mut() {
                        *x = S::from_f64_lossy(normal.sample(&mut rng) * residual_scale);
                    }
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            layout: Arc::new(layout),
            data,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[S]> {
        self.layout.get(name).map(|t| &self.data[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [S]> {
        let r = self.layout.get(name)?.range();
        Some(&mut self.data[r])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn zeros_like(&self) -> GradientSet<S> {
        GradientSet {
            layout: Arc::clone(&self.layout),
            data: vec![S::zero(); self.data.len()],
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParameterSet<T> {
        ParameterSet {
            config: self.config.clone(),
            layout: Arc::clone(&self.layout),
            data: self.data.iter().map(|x| T::from_f64_lossy(x.to_f64_lossy())).collect(),
        }
    }
}

impl<S: Scalar> GradientSet<S> {
    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn tensor(&self, name: &str) -> Option<&[S]> {
        self.layout.get(name).map(|t| &self.data[t.range()])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Global L2 norm, accumulated in `f64`.
    pub fn global_norm(&self) -> f64 {
        crate::linalg::sum_squares_f64(&self.data).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scale(&mut self, factor: S) {
        for g in &mut self.data {
            *g *= factor;
        }
    }
}

pub fn init_params<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParameterSet<S>> {
    ParameterSet::init(config, seed)
}
