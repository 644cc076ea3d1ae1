//! Training objectives: next-token cross-entropy, forward-KL distillation
//! against a frozen teacher, and their convex mixture.
//!
//! All reductions are plain means over every position of the batch,
//! accumulated with compensated summation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_softmax_into, softmax_into, CompensatedSum};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    /// Weight of the distillation term.
    pub alpha: f64,
    /// Softmax temperature applied to both teacher and student logits.
    pub temperature: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            temperature: 1.0,
        }
    }
}

impl LossParams {
    pub fn new(alpha: f64, temperature: f64) -> Result<Self> {
        let p = Self { alpha, temperature };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::AlphaOutOfRange(self.alpha));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn positions(logits_len: usize, vocab: usize) -> Result<usize> {
    if vocab == 0 || logits_len % vocab != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{logits_len} logits is not a multiple of vocabulary {vocab}"
        )));
    }
    Ok(logits_len / vocab)
}

fn check_targets(targets: &[u32], n: usize, vocab: usize) -> Result<()> {
    if targets.len() != n {
        return Err(Error::ShapeMismatch(format!("{} targets for {n} positions", targets.len())));
    }
    if let Some(&id) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::IdOutOfRange { id, vocab_size: vocab });
    }
    Ok(())
}

/// Mean of `−log softmax(logits)[target]` and its gradient with respect to
/// the logits.
pub fn lm_loss_and_grad<S: Scalar>(logits: &[S], targets: &[u32], vocab: usize) -> Result<(S, Vec<S>)> {
    let n = positions(logits.len(), vocab)?;
    check_targets(targets, n, vocab)?;
    let inv_n = S::one() / S::from_usize_lossy(n);
    let mut grad = vec![S::zero(); logits.len()];
    let mut total = CompensatedSum::new();
    let mut logp = vec![S::zero(); vocab];
    for ((row, g), &t) in logits.chunks_exact(vocab).zip(grad.chunks_exact_mut(vocab)).zip(targets) {
        log_softmax_into(row, S::one(), &mut logp);
        total.add(-logp[t as usize].to_f64_lossy());
        for (gi, &lp) in g.iter_mut().zip(&logp) {
            *gi = lp.exp() * inv_n;
        }
        g[t as usize] -= inv_n;
    }
    Ok((S::from_f64_lossy(total.value() / n as f64), grad))
}

pub fn lm_loss<S: Scalar>(logits: &[S], targets: &[u32], vocab: usize) -> Result<S> {
    let n = positions(logits.len(), vocab)?;
    check_targets(targets, n, vocab)?;
    let mut total = CompensatedSum::new();
    let mut logp = vec![S::zero(); vocab];
    for (row, &t) in logits.chunks_exact(vocab).zip(targets) {
        log_softmax_into(row, S::one(), &mut logp);
        total.add(-logp[t as usize].to_f64_lossy());
    }
    Ok(S::from_f64_lossy(total.value() / n as f64))
}

fn kd_impl<S: Scalar>(teacher: &[S], student: &[S], vocab: usize, temperature: S, want_grad: bool) -> Result<(S, Vec<S>)> {
    if teacher.len() != student.len() {
        return Err(Error::ShapeMismatch(format!(
            "teacher logits {} vs student logits {}",
            teacher.len(),
            student.len()
        )));
    }
    if !(temperature > S::zero()) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let n = positions(student.len(), vocab)?;
    let scale = S::one() / (S::from_usize_lossy(n) * temperature);
    let mut grad = if want_grad { vec![S::zero(); student.len()] } else { Vec::new() };
    let mut total = CompensatedSum::new();
    let mut log_q = vec![S::zero(); vocab];
    let mut log_p = vec![S::zero(); vocab];
    for (i, (t_row, s_row)) in teacher.chunks_exact(vocab).zip(student.chunks_exact(vocab)).enumerate() {
        log_softmax_into(t_row, temperature, &mut log_q);
        log_softmax_into(s_row, temperature, &mut log_p);
        let mut kl = CompensatedSum::new();
        for (&lq, &lp) in log_q.iter().zip(&log_p) {
            let q = lq.exp();
            if q > S::zero() {
                kl.add((q * (lq - lp)).to_f64_lossy());
            }
        }
        // KL is nonnegative; clamp rounding noise
        total.add(kl.value().max(0.0));
        if want_grad {
            let g = &mut grad[i * vocab..(i + 1) * vocab];
            for ((gi, &lq), &lp) in g.iter_mut().zip(&log_q).zip(&log_p) {
                *gi = (lp.exp() - lq.exp()) * scale;
            }
        }
    }
    Ok((S::from_f64_lossy(total.value() / n as f64), grad))
}

/// Mean over positions of `KL(q_t ‖ p_t)` where `q`, `p` are the
/// temperature-scaled softmaxes of teacher and student logits.
pub fn kd_loss<S: Scalar>(teacher_logits: &[S], student_logits: &[S], vocab: usize, temperature: S) -> Result<S> {
    kd_impl(teacher_logits, student_logits, vocab, temperature, false).map(|(l, _)| l)
}

/// [`kd_loss`] and its gradient `(p − q) / (τ · positions)` with respect to
/// the student logits. The teacher receives no gradient.
pub fn kd_loss_and_grad<S: Scalar>(
    teacher_logits: &[S],
    student_logits: &[S],
    vocab: usize,
    temperature: S,
) -> Result<(S, Vec<S>)> {
    kd_impl(teacher_logits, student_logits, vocab, temperature, true)
}

/// `(1 − α)·lm + α·kd`, exact at both endpoints.
pub fn mixed_loss<S: Scalar>(lm: S, kd: S, alpha: S) -> Result<S> {
    if !(alpha >= S::zero() && alpha <= S::one()) {
        return Err(Error::AlphaOutOfRange(alpha.to_f64_lossy()));
    }
    Ok(if alpha == S::zero() {
        lm
    } else if alpha == S::one() {
        kd
    } else {
        (S::one() - alpha) * lm + alpha * kd
    })
}

/// Value of an objective and its gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct LossBreakdown<S> {
    pub loss: S,
    pub lm: Option<S>,
    pub kd: Option<S>,
    pub dlogits: Vec<S>,
}

/// A differentiable function of the logits and targets.
pub trait Objective<S: Scalar> {
    fn evaluate(&self, logits: &[S], targets: &[u32], vocab: usize) -> Result<LossBreakdown<S>>;
}

/// Plain next-token prediction.
#[derive(Debug, Clone, Copy, Default)]
pub struct LmObjective;

impl<S: Scalar> Objective<S> for LmObjective {
    fn evaluate(&self, logits: &[S], targets: &[u32], vocab: usize) -> Result<LossBreakdown<S>> {
        let (lm, dlogits) = lm_loss_and_grad(logits, targets, vocab)?;
        Ok(LossBreakdown {
            loss: lm,
            lm: Some(lm),
            kd: None,
            dlogits,
        })
    }
}

/// The mixed objective `(1 − α)·L_lm + α·L_kd` against fixed teacher logits.
///
/// Terms with zero weight contribute neither value nor gradient, so
/// `α = 0` is bit-identical to [`LmObjective`] and at `α = 1` the targets
/// only affect the logged LM value.
#[derive(Debug, Clone, Copy)]
pub struct MixedObjective<'a, S> {
    pub params: LossParams,
    pub teacher_logits: &'a [S],
}

impl<'a, S: Scalar> MixedObjective<'a, S> {
    pub fn new(params: LossParams, teacher_logits: &'a [S]) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            teacher_logits,
        })
    }
}

impl<S: Scalar> Objective<S> for MixedObjective<'_, S> {
    fn evaluate(&self, logits: &[S], targets: &[u32], vocab: usize) -> Result<LossBreakdown<S>> {
        let alpha = S::from_f64_lossy(self.params.alpha);
        let tau = S::from_f64_lossy(self.params.temperature);
        let (lm, dlm) = lm_loss_and_grad(logits, targets, vocab)?;
        let (kd, dkd) = kd_loss_and_grad(self.teacher_logits, logits, vocab, tau)?;
        let loss = mixed_loss(lm, kd, alpha)?;
        let dlogits = if alpha == S::zero() {
            dlm
        } else if alpha == S::one() {
            dkd
        } else {
            let w_lm = S::one() - alpha;
            dlm.iter().zip(&dkd).map(|(&a, &b)| w_lm * a + alpha * b).collect()
        };
        Ok(LossBreakdown {
            loss,
            lm: Some(lm),
            kd: Some(kd),
            dlogits,
        })
    }
}

/// Softmax probabilities of one row, exposed for gradient-identity checks.
pub fn probabilities<S: Scalar>(row: &[S], temperature: S) -> Vec<S> {
    let mut out = vec![S::zero(); row.len()];
    softmax_into(row, temperature, &mut out);
    out
}
