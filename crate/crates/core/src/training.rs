//! Optimization recipe and the three run roles.
//!
//! AdamW with decoupled weight decay (norm gains excluded), linear warmup
//! into a cosine decay, global-norm clipping. A teacher run and a baseline
//! run both optimize the LM loss; a distillation run optimizes the mixed
//! objective against a frozen teacher. Runs sharing a `data_seed` consume
//! the same batches in the same order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{BatchStream, TokenPool, DEFAULT_BATCH_SIZE};
use crate::error::{Error, Result};
use crate::losses::{LmObjective, LossParams, MixedObjective};
use crate::model::{forward_logits, loss_and_grads, GradientSet, ModelConfig, ParameterSet, TensorKind};
use crate::scalar::Scalar;
use crate::teacher::{CacheMode, TeacherLogitCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Baseline,
    Distill,
}

/// How a distillation run obtains teacher logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TeacherLogits {
    /// Forward the teacher on every batch.
    #[default]
    OnTheFly,
    /// Precompute once; `top_k: None` stores full rows and is exact.
    Cached { top_k: Option<usize> },
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.95)
}

/// One training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub role: Role,
    pub model: ModelConfig,
    pub token_budget: u64,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "RunConfig::default_temperature")]
    pub temperature: f64,
    #[serde(default = "RunConfig::default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "RunConfig::default_warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default = "RunConfig::default_final_lr_frac")]
    pub final_lr_frac: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "RunConfig::default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "RunConfig::default_clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "RunConfig::default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "RunConfig::default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub teacher_logits: TeacherLogits,
}

impl RunConfig {
    fn default_temperature() -> f64 {
        1.0
    }
    fn default_peak_lr() -> f64 {
        3e-4
    }
    fn default_warmup_frac() -> f64 {
        0.05
    }
    fn default_final_lr_frac() -> f64 {
        0.1
    }
    fn default_weight_decay() -> f64 {
        0.1
    }
    fn default_clip_norm() -> f64 {
        1.0
    }
    fn default_adam_eps() -> f64 {
        1e-8
    }
    fn default_batch_size() -> usize {
        DEFAULT_BATCH_SIZE
    }

    /// A run with the default optimizer settings.
    pub fn new(role: Role, model: ModelConfig, token_budget: u64) -> Self {
        Self {
            role,
            model,
            token_budget,
            data_seed: 0,
            init_seed: 0,
            alpha: 0.0,
            temperature: 1.0,
            peak_lr: Self::default_peak_lr(),
            warmup_frac: Self::default_warmup_frac(),
            final_lr_frac: Self::default_final_lr_frac(),
            betas: default_betas(),
            weight_decay: Self::default_weight_decay(),
            clip_norm: Self::default_clip_norm(),
            adam_eps: Self::default_adam_eps(),
            batch_size: DEFAULT_BATCH_SIZE,
            teacher_checkpoint: None,
            teacher_logits: TeacherLogits::OnTheFly,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        LossParams::new(self.alpha, self.temperature)?;
        match self.role {
            Role::Distill => {
                if self.teacher_checkpoint.is_none() {
                    return Err(Error::InvalidConfig("distill run needs teacher_checkpoint".into()));
                }
                if !(self.alpha > 0.0) {
                    return Err(Error::InvalidConfig("distill run needs alpha > 0".into()));
                }
            }
            Role::Baseline | Role::Teacher => {
                if self.alpha != 0.0 {
                    return Err(Error::InvalidConfig(format!("{:?} run must have alpha 0", self.role)));
                }
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.final_lr_frac) {
            return Err(Error::InvalidConfig("warmup_frac in [0,1), final_lr_frac in [0,1]".into()));
        }
        if !(self.clip_norm > 0.0) || !(self.peak_lr >= 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig("clip_norm, adam_eps must be positive; peak_lr nonnegative".into()));
        }
        if self.total_steps() == 0 {
            return Err(Error::InvalidConfig(format!(
                "token budget {} is smaller than one batch of {} tokens",
                self.token_budget,
                self.tokens_per_step()
            )));
        }
        Ok(())
    }

    pub fn tokens_per_step(&self) -> u64 {
        (self.batch_size * self.model.context_len) as u64
    }

    /// Whole steps in the budget; a partial final batch is dropped.
    pub fn total_steps(&self) -> usize {
        (self.token_budget / self.tokens_per_step()) as usize
    }

    pub fn loss_params(&self) -> LossParams {
        LossParams {
            alpha: self.alpha,
            temperature: self.temperature,
        }
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Linear warmup from 0 to `peak` over the first `warmup_frac` of steps,
/// then cosine decay to `final_frac * peak` at `total_steps`.
pub fn lr_at_step(step: usize, total_steps: usize, peak: f64, warmup_frac: f64, final_frac: f64) -> f64 {
    let step = step.min(total_steps);
    let warmup = (warmup_frac * total_steps as f64).round() as usize;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let floor = final_frac * peak;
    if total_steps == warmup {
        return peak;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    peak - (peak - floor) * (1.0 - cosine)
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut GradientSet<S>, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidArgument(format!("max_norm {max_norm} must be positive")));
    }
    if !grads.all_finite() {
        return Err(Error::NonFiniteGradient);
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(S::from_f64_lossy(max_norm / norm));
    }
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// First and second moments plus the number of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &ParameterSet<S>) -> Self {
        Self {
            m: vec![S::zero(); params.len()],
            v: vec![S::zero(); params.len()],
            step: 0,
        }
    }
}

/// One AdamW update with bias correction. Norm gains are not decayed.
pub fn adamw_step<S: Scalar>(
    params: &mut ParameterSet<S>,
    grads: &GradientSet<S>,
    state: &mut OptimizerState<S>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch("optimizer state, gradients and parameters differ in size".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = S::from_f64_lossy(cfg.beta1);
    let b2 = S::from_f64_lossy(cfg.beta2);
    let bc1 = S::from_f64_lossy(1.0 - cfg.beta1.powi(t));
    let bc2 = S::from_f64_lossy(1.0 - cfg.beta2.powi(t));
    let lr_s = S::from_f64_lossy(lr);
    let eps = S::from_f64_lossy(cfg.eps);
    let decay = S::one() - S::from_f64_lossy(lr * cfg.weight_decay);
    let spans: Vec<(std::ops::Range<usize>, bool)> = params
        .layout()
        .tensors
        .iter()
        .map(|t| (t.range(), t.kind != TensorKind::NormGain))
        .collect();
    let p = params.as_mut_slice();
    let g = grads.as_slice();
    for (range, decayed) in spans {
        for i in range {
            state.m[i] = b1 * state.m[i] + (S::one() - b1) * g[i];
            state.v[i] = b2 * state.v[i] + (S::one() - b2) * g[i] * g[i];
            let m_hat = state.m[i] / bc1;
            let v_hat = state.v[i] / bc2;
            if decayed {
                p[i] *= decay;
            }
            p[i] -= lr_s * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub tokens_seen: u64,
    pub lm_loss: f64,
    pub kd_loss: Option<f64>,
    pub mixed_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub const CSV_HEADER: &'static str = "step,tokens_seen,lm_loss,kd_loss,mixed_loss,lr,grad_norm";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let kd = r.kd_loss.map(|k| k.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.step, r.tokens_seen, r.lm_loss, kd, r.mixed_loss, r.lr, r.grad_norm
            );
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.mixed_loss)
    }
}

/// Where a distillation run gets its teacher distribution from.
pub enum TeacherSource<'a, S> {
    Live(&'a ParameterSet<S>),
    Cached(&'a TeacherLogitCache<S>),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub params: ParameterSet<S>,
    pub log: TrainingLog,
}

/// Trains from `run.init_seed` on `pool` reseeded with `run.data_seed`.
///
/// With a teacher the mixed objective is used at `run.alpha` (including
/// `alpha = 0`); without one, the LM objective. Role checks are the
/// caller's business; see [`train_run`].
pub fn train_with_teacher<S: Scalar>(
    run: &RunConfig,
    pool: &TokenPool,
    teacher: Option<TeacherSource<'_, S>>,
) -> Result<TrainOutcome<S>> {
    train_observed(run, pool, teacher, None)
}

/// Periodic read-only access to the parameters during training.
pub struct StepObserver<'a, S> {
    /// Called after every `every`-th update except the last.
    pub every: usize,
    pub callback: &'a mut dyn FnMut(usize, &ParameterSet<S>) -> Result<()>,
}

/// [`train_with_teacher`] with an optional observer for intermediate
/// evaluation.
pub fn train_observed<S: Scalar>(
    run: &RunConfig,
    pool: &TokenPool,
    teacher: Option<TeacherSource<'_, S>>,
    mut observer: Option<StepObserver<'_, S>>,
) -> Result<TrainOutcome<S>> {
    run.model.validate()?;
    let loss_params = LossParams::new(run.alpha, run.temperature)?;
    if pool.vocab_size() != run.model.vocab_size {
        return Err(Error::VocabMismatch(format!(
            "pool vocabulary {} vs model {}",
            pool.vocab_size(),
            run.model.vocab_size
        )));
    }
    let steps = run.total_steps();
    let ctx = run.model.context_len;
    let mut stream = BatchStream::new(pool.with_seed(run.data_seed), ctx, run.batch_size);
    if stream.remaining_batches() < steps {
        return Err(Error::PoolExhausted {
            remaining: stream.remaining_batches() * run.batch_size * (ctx + 1),
            needed: steps * run.batch_size * (ctx + 1),
        });
    }
    if let Some(TeacherSource::Cached(cache)) = &teacher {
        cache.check_compatible(run, pool)?;
    }
    if let Some(TeacherSource::Live(t)) = &teacher {
        if t.config().vocab_size != run.model.vocab_size {
            return Err(Error::VocabMismatch("teacher and student vocabularies differ".into()));
        }
    }

    let mut params = ParameterSet::<S>::init(&run.model, run.init_seed)?;
    let mut state = OptimizerState::new(&params);
    let adamw = run.adamw();
    let mut log = TrainingLog::default();
    for step in 0..steps {
        let batch = stream.next_batch()?;
        let teacher_logits = match &teacher {
            None => None,
            Some(TeacherSource::Live(t)) => Some(forward_logits(*t, &batch.inputs, batch.batch_size, ctx)?),
            Some(TeacherSource::Cached(c)) => Some(c.logits_for_step(step)?),
        };
        let result = match &teacher_logits {
            None => loss_and_grads(&params, &batch, &LmObjective),
            Some(tl) => loss_and_grads(&params, &batch, &MixedObjective::new(loss_params, tl)?),
        };
        let (breakdown, mut grads) = match result {
            Ok(r) => r,
            Err(Error::NonFiniteLoss(loss)) => return Err(Error::Diverged { step, loss }),
            Err(e) => return Err(e),
        };
        let grad_norm = match clip_global_norm(&mut grads, run.clip_norm) {
            Ok(n) => n,
            Err(Error::NonFiniteGradient) => return Err(Error::Diverged { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        // the update after step i uses the schedule value at i + 1, so the
        // last update lands exactly on the final learning rate
        let lr = lr_at_step(step + 1, steps, run.peak_lr, run.warmup_frac, run.final_lr_frac);
        adamw_step(&mut params, &grads, &mut state, lr, &adamw)?;
        log.rows.push(LogRow {
            step,
            tokens_seen: (step as u64 + 1) * run.tokens_per_step(),
            lm_loss: breakdown.lm.map(|x| x.to_f64_lossy()).unwrap_or(f64::NAN),
            kd_loss: breakdown.kd.map(|x| x.to_f64_lossy()),
            mixed_loss: breakdown.loss.to_f64_lossy(),
            lr,
            grad_norm,
        });
        if let Some(obs) = observer.as_mut() {
            if obs.every > 0 && (step + 1) % obs.every == 0 && step + 1 < steps {
                (obs.callback)(step + 1, &params)?;
            }
        }
    }
    Ok(TrainOutcome { params, log })
}

/// Validates the role contract, loads the teacher for distillation runs and
/// trains in single precision.
pub fn train_run(run: &RunConfig, pool: &TokenPool) -> Result<TrainOutcome<f32>> {
    train_run_observed(run, pool, None)
}

pub fn train_run_observed(
    run: &RunConfig,
    pool: &TokenPool,
    observer: Option<StepObserver<'_, f32>>,
) -> Result<TrainOutcome<f32>> {
    run.validate()?;
    match run.role {
        Role::Teacher | Role::Baseline => train_observed::<f32>(run, pool, None, observer),
        Role::Distill => {
            let path = run.teacher_checkpoint.as_ref().expect("validated");
            let teacher: ParameterSet<f32> = crate::checkpoint::load(path)?;
            match run.teacher_logits {
                TeacherLogits::OnTheFly => train_observed(run, pool, Some(TeacherSource::Live(&teacher)), observer),
                TeacherLogits::Cached { top_k } => {
                    let mode = match top_k {
                        None => CacheMode::Full,
                        Some(k) => CacheMode::TopK(k),
                    };
                    let cache = TeacherLogitCache::build(&teacher, run, pool, mode)?;
                    train_observed(run, pool, Some(TeacherSource::Cached(&cache)), observer)
                }
            }
        }
    }
}
