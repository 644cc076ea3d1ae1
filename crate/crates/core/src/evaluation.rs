//! Perplexity, multiple-choice scoring and improvement accounting.
//!
//! Perplexity is computed over sequential, non-overlapping windows of
//! `context_len + 1` tokens (the trailing partial window is dropped), the
//! same shape the training stream uses. Improvements are always
//! percentages relative to the α = 0 baseline and are averaged as
//! percentages, never as raw scores.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{window_span, TokenPool};
use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::numerics::{log_sum_exp, CompensatedSum};
use crate::scalar::Scalar;

/// Pool id of the in-domain held-out split.
pub const HELD_OUT: &str = "held_out";

/// The mixing coefficients every sweep must cover.
pub const ALPHA_GRID: [f64; 6] = [0.2, 0.4, 0.5, 0.6, 0.8, 1.0];

const EVAL_BATCH: usize = 8;

/// Per-token negative log-likelihoods of `targets` under `logits`, in nats.
pub fn token_nlls<S: Scalar>(logits: &[S], targets: &[u32], vocab: usize) -> Vec<f64> {
    logits
        .chunks_exact(vocab)
        .zip(targets)
        .map(|(row, &t)| (log_sum_exp(row) - row[t as usize]).to_f64_lossy())
        .collect()
}

/// Sequential evaluation windows of `context_len + 1` tokens.
pub fn eval_windows(pool: &TokenPool, context_len: usize) -> impl Iterator<Item = &[u32]> {
    let n = pool.len() / (context_len + 1);
    (0..n).map(move |w| &pool.tokens()[window_span(w, context_len)])
}

/// Calls `f(window_index, row_logits, targets)` for every evaluation window,
/// batching forward passes.
pub fn for_each_window<S: Scalar, M: LanguageModel<S> + ?Sized>(
    model: &M,
    pool: &TokenPool,
    context_len: usize,
    mut f: impl FnMut(usize, &[S], &[u32]) -> Result<()>,
) -> Result<usize> {
    if context_len == 0 || context_len > model.context_len() {
        return Err(Error::ContextOverflow {
            len: context_len,
            max: model.context_len(),
        });
    }
    let windows: Vec<&[u32]> = eval_windows(pool, context_len).collect();
    if windows.is_empty() {
        return Err(Error::CorpusTooSmall {
            what: format!("perplexity on `{}`", pool.pool_id()),
            needed: context_len + 1,
            available: pool.len(),
        });
    }
    let vocab = model.vocab_size();
    for (chunk_idx, chunk) in windows.chunks(EVAL_BATCH).enumerate() {
        let inputs: Vec<u32> = chunk.iter().flat_map(|w| w[..context_len].iter().copied()).collect();
        let logits = model.logits(&inputs, chunk.len(), context_len)?;
        for (b, w) in chunk.iter().enumerate() {
            let rows = &logits[b * context_len * vocab..(b + 1) * context_len * vocab];
            f(chunk_idx * EVAL_BATCH + b, rows, &w[1..])?;
        }
    }
    Ok(windows.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub perplexity: f64,
    pub mean_nll: f64,
    pub tokens: usize,
    pub windows: usize,
}

/// `exp` of the mean per-token NLL over the pool's evaluation windows.
pub fn perplexity<S: Scalar, M: LanguageModel<S> + ?Sized>(model: &M, pool: &TokenPool, context_len: usize) -> Result<Perplexity> {
    let vocab = model.vocab_size();
    let mut total = CompensatedSum::new();
    let mut tokens = 0usize;
    let windows = for_each_window(model, pool, context_len, |_, logits, targets| {
        for nll in token_nlls(logits, targets, vocab) {
            total.add(nll);
        }
        tokens += targets.len();
        Ok(())
    })?;
    let mean_nll = total.value() / tokens as f64;
    if !mean_nll.is_finite() {
        return Err(Error::NonFiniteLoss(mean_nll));
    }
    Ok(Perplexity {
        perplexity: mean_nll.exp(),
        mean_nll,
        tokens,
        windows,
    })
}

/// Summed log-likelihood of each choice continuing `prompt`.
pub fn mc_scores<S: Scalar, M: LanguageModel<S> + ?Sized>(model: &M, prompt: &[u32], choices: &[Vec<u32>]) -> Result<Vec<f64>> {
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    let vocab = model.vocab_size();
    choices
        .iter()
        .map(|choice| {
            if choice.is_empty() {
                return Err(Error::Empty("choice"));
            }
            let seq: Vec<u32> = prompt.iter().chain(choice).copied().collect();
            let len = seq.len() - 1;
            if len > model.context_len() {
                return Err(Error::ContextOverflow {
                    len,
                    max: model.context_len(),
                });
            }
            let logits = model.logits(&seq[..len], 1, len)?;
            let start = prompt.len() - 1;
            let nlls = token_nlls(&logits[start * vocab..], &seq[prompt.len()..], vocab);
            Ok(-nlls.iter().copied().collect::<CompensatedSum>().value())
        })
        .collect()
}

fn char_count(tokens: &[u32]) -> usize {
    let bytes: Vec<u8> = tokens.iter().map(|&t| t.min(255) as u8).collect();
    String::from_utf8_lossy(&bytes).chars().count()
}

/// Index of the first choice with the highest (optionally per-character)
/// log-likelihood.
pub fn mc_select<S: Scalar, M: LanguageModel<S> + ?Sized>(
    model: &M,
    prompt: &[u32],
    choices: &[Vec<u32>],
    length_norm: bool,
) -> Result<usize> {
    if choices.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 choices, got {}", choices.len())));
    }
    let mut scores = mc_scores(model, prompt, choices)?;
    if length_norm {
        for (s, c) in scores.iter_mut().zip(choices) {
            *s /= char_count(c) as f64;
        }
    }
    Ok(argmax_first(&scores))
}

/// Position of the maximum; the earliest wins ties.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McItem {
    pub prompt: Vec<u32>,
    pub choices: Vec<Vec<u32>>,
    pub answer: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McTask {
    pub name: String,
    pub length_norm: bool,
    pub items: Vec<McItem>,
}

/// Longest answer produced by [`synthetic_tasks`].
pub const MC_MAX_ANSWER_LEN: usize = 24;

/// Continuation tasks cut from `pool`: the prompt is a span of text, the
/// right answer is the text that follows it and the distractors are spans
/// taken from elsewhere in the pool.
///
/// Answers are at most [`MC_MAX_ANSWER_LEN`] tokens long.
///
/// Two variants are produced: `continuation_short` (equal-length choices,
/// raw log-likelihood) and `continuation_mixed` (choices of varying length,
/// length-normalized).
pub fn synthetic_tasks(pool: &TokenPool, prompt_len: usize, items: usize, seed: u64) -> Result<Vec<McTask>> {
    const CHOICES: usize = 4;
    const MAX_DRAWS: usize = 1000;
    let tokens = pool.tokens();
    let max_answer = MC_MAX_ANSWER_LEN;
    if prompt_len == 0 || tokens.len() < 4 * (prompt_len + max_answer) {
        return Err(Error::CorpusTooSmall {
            what: format!("multiple-choice tasks from `{}`", pool.pool_id()),
            needed: 4 * (prompt_len + max_answer),
            available: tokens.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut build = |name: &str, length_norm: bool| -> Option<McTask> {
        let items = (0..items)
            .map(|_| {
                let lens: Vec<usize> = if length_norm {
                    (0..CHOICES).map(|_| rng.random_range(6..=max_answer)).collect()
                } else {
                    vec![8; CHOICES]
                };
                let start = rng.random_range(0..tokens.len() - prompt_len - max_answer);
                let prompt = tokens[start..start + prompt_len].to_vec();
                let truth = tokens[start + prompt_len..start + prompt_len + lens[0]].to_vec();
                let mut choices = vec![truth.clone()];
                for &len in &lens[1..] {
                    for _ in 0..MAX_DRAWS {
                        let s = rng.random_range(0..tokens.len() - len);
                        let cand = tokens[s..s + len].to_vec();
                        if !choices.contains(&cand) {
                            choices.push(cand);
                            break;
                        }
                    }
                }
                if choices.len() < CHOICES {
                    return None;
                }
                choices.shuffle(&mut rng);
                let answer = choices.iter().position(|c| *c == truth).expect("truth present");
                Some(McItem { prompt, choices, answer })
            })
            .collect::<Option<Vec<_>>>();
        items.map(|items| McTask {
            name: name.to_string(),
            length_norm,
            items,
        })
    };
    let short = build("continuation_short", false);
    let mixed = build("continuation_mixed", true);
    match (short, mixed) {
        (Some(a), Some(b)) => Ok(vec![a, b]),
        _ => Err(Error::InvalidArgument(format!(
            "pool `{}` is too repetitive for distinct distractors",
            pool.pool_id()
        ))),
    }
}

/// Fraction of items answered correctly.
pub fn accuracy<S: Scalar, M: LanguageModel<S> + ?Sized>(model: &M, task: &McTask) -> Result<f64> {
    if task.items.is_empty() {
        return Err(Error::Empty("task items"));
    }
    let mut correct = 0usize;
    for item in &task.items {
        if mc_select(model, &item.prompt, &item.choices, task.length_norm)? == item.answer {
            correct += 1;
        }
    }
    Ok(correct as f64 / task.items.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub perplexities: BTreeMap<String, f64>,
    pub accuracies: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for (pool, &ppl) in &self.perplexities {
            if !(ppl >= 1.0) || !ppl.is_finite() {
                return Err(Error::InvalidArgument(format!("perplexity {ppl} on `{pool}` below 1")));
            }
        }
        for (task, &acc) in &self.accuracies {
            if !(0.0..=1.0).contains(&acc) {
                return Err(Error::InvalidArgument(format!("accuracy {acc} on `{task}` outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let report: Self = serde_json::from_slice(&fs::read(path).map_err(|e| Error::io(path, e))?)?;
        report.validate()?;
        Ok(report)
    }
}

/// Perplexity on every pool and accuracy on every task.
pub fn evaluate<S: Scalar, M: LanguageModel<S> + ?Sized>(
    model: &M,
    model_id: &str,
    pools: &[&TokenPool],
    tasks: &[McTask],
    context_len: usize,
) -> Result<EvalReport> {
    let mut report = EvalReport {
        model_id: model_id.to_string(),
        perplexities: BTreeMap::new(),
        accuracies: BTreeMap::new(),
    };
    for pool in pools {
        let p = perplexity(model, pool, context_len)?;
        report.perplexities.insert(pool.pool_id().to_string(), p.perplexity);
    }
    for task in tasks {
        report.accuracies.insert(task.name.clone(), accuracy(model, task)?);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Ppl,
    Acc,
}

/// Signed percent change against `baseline`, positive meaning better.
pub fn pct_improvement(baseline: f64, value: f64, kind: MetricKind) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::NonPositiveBaseline(baseline));
    }
    Ok(match kind {
        MetricKind::Ppl => 100.0 * (baseline - value) / baseline,
        MetricKind::Acc => 100.0 * (value - baseline) / baseline,
    })
}

/// Arithmetic mean of percentages.
pub fn aggregate_improvements(pcts: &[f64]) -> Result<f64> {
    if pcts.is_empty() {
        return Err(Error::Empty("improvement list"));
    }
    Ok(pcts.iter().sum::<f64>() / pcts.len() as f64)
}

/// Aggregate metric names used in improvement tables.
pub mod metric {
    pub const IN_DOMAIN: &str = "in_domain";
    pub const OOD: &str = "ood";
    pub const MC: &str = "mc";
    pub const JOINT: &str = "joint";

    pub fn ppl(pool: &str) -> String {
        format!("ppl:{pool}")
    }

    pub fn acc(task: &str) -> String {
        format!("acc:{task}")
    }
}

/// Per-benchmark percentages of `report` over `baseline`, keyed by
/// `ppl:<pool>` and `acc:<task>`. Tasks where the baseline scores zero have
/// no relative improvement and are left out.
pub fn benchmark_improvements(baseline: &EvalReport, report: &EvalReport) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (pool, &b) in &baseline.perplexities {
        let v = report
            .perplexities
            .get(pool)
            .ok_or_else(|| Error::IncompleteGrid(format!("`{}` has no perplexity on `{pool}`", report.model_id)))?;
        out.insert(metric::ppl(pool), pct_improvement(b, *v, MetricKind::Ppl)?);
    }
    for (task, &b) in baseline.accuracies.iter().filter(|(_, &b)| b > 0.0) {
        let v = report
            .accuracies
            .get(task)
            .ok_or_else(|| Error::IncompleteGrid(format!("`{}` has no accuracy on `{task}`", report.model_id)))?;
        out.insert(metric::acc(task), pct_improvement(b, *v, MetricKind::Acc)?);
    }
    Ok(out)
}

/// Folds per-benchmark percentages into the three evaluation dimensions:
/// in-domain perplexity, mean OOD perplexity, mean MC accuracy.
pub fn dimension_improvements(benchmarks: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>> {
    let mut ood = Vec::new();
    let mut mc = Vec::new();
    let mut out = BTreeMap::new();
    for (name, &pct) in benchmarks {
        if name == &metric::ppl(HELD_OUT) {
            out.insert(metric::IN_DOMAIN.to_string(), pct);
        } else if name.starts_with("ppl:") {
            ood.push(pct);
        } else {
            mc.push(pct);
        }
    }
    if !ood.is_empty() {
        out.insert(metric::OOD.to_string(), aggregate_improvements(&ood)?);
    }
    if !mc.is_empty() {
        out.insert(metric::MC.to_string(), aggregate_improvements(&mc)?);
    }
    let all: Vec<f64> = benchmarks.values().copied().collect();
    out.insert(metric::JOINT.to_string(), aggregate_improvements(&all)?);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub teacher_label: String,
    pub tokens: u64,
    pub alpha: f64,
    pub metric: String,
    pub pct: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImprovementTable {
    pub baseline_id: String,
    pub rows: Vec<ImprovementRow>,
}

impl ImprovementTable {
    pub const CSV_HEADER: &'static str = "teacher_label,tokens,alpha,metric,pct";

    /// Values are written with shortest round-trip formatting so the CSV
    /// parses back to the exact same `f64`s.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.teacher_label, r.tokens, r.alpha, r.metric, r.pct);
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// One `(teacher, α)` cell's per-metric percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaCell {
    pub teacher: String,
    pub alpha: f64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    /// Best α separately for every metric.
    PerMetric,
    /// Best α for the equal-weighted mean of all metrics.
    Joint,
}

/// Best α per `(teacher, metric)`; in joint mode the metric key is
/// [`metric::JOINT`]. Ties go to the smaller α.
pub fn select_best_alpha(
    cells: &[AlphaCell],
    required_alphas: &[f64],
    mode: SelectMode,
) -> Result<BTreeMap<(String, String), f64>> {
    let mut by_teacher: BTreeMap<&str, Vec<&AlphaCell>> = BTreeMap::new();
    for c in cells {
        by_teacher.entry(c.teacher.as_str()).or_default().push(c);
    }
    let mut out = BTreeMap::new();
    for (teacher, mut group) in by_teacher {
        for &a in required_alphas {
            if !group.iter().any(|c| c.alpha == a) {
                return Err(Error::IncompleteGrid(format!("teacher `{teacher}` lacks alpha {a}")));
            }
        }
        group.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
        let metrics: Vec<&String> = group[0].metrics.keys().collect();
        for c in &group[1..] {
            if c.metrics.keys().collect::<Vec<_>>() != metrics {
                return Err(Error::IncompleteGrid(format!(
                    "teacher `{teacher}` alpha {} reports different metrics",
                    c.alpha
                )));
            }
        }
        if metrics.is_empty() {
            return Err(Error::IncompleteGrid(format!("teacher `{teacher}` has no metrics")));
        }
        match mode {
            SelectMode::PerMetric => {
                for m in metrics {
                    let values: Vec<f64> = group.iter().map(|c| c.metrics[m]).collect();
                    out.insert((teacher.to_string(), m.clone()), group[argmax_first(&values)].alpha);
                }
            }
            SelectMode::Joint => {
                let values = group
                    .iter()
                    .map(|c| aggregate_improvements(&c.metrics.values().copied().collect::<Vec<_>>()))
                    .collect::<Result<Vec<f64>>>()?;
                out.insert((teacher.to_string(), metric::JOINT.to_string()), group[argmax_first(&values)].alpha);
            }
        }
    }
    Ok(out)
}

/// `(v − min) / (max − min) · 100`; if every value is equal, all map to 100.
pub fn minmax_normalize(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite value in normalization".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![100.0; values.len()]);
    }
    Ok(values.iter().map(|v| (v - lo) / (hi - lo) * 100.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pct_signs_and_errors() {
        assert_eq!(pct_improvement(10.0, 10.0, MetricKind::Ppl).unwrap(), 0.0);
        assert_eq!(pct_improvement(10.0, 9.0, MetricKind::Ppl).unwrap(), 10.0);
        assert_eq!(pct_improvement(0.5, 0.75, MetricKind::Acc).unwrap(), 50.0);
        assert!(matches!(pct_improvement(0.0, 1.0, MetricKind::Acc), Err(Error::NonPositiveBaseline(_))));
    }

    #[test]
    fn pct_kinds_are_mirror_images() {
        for (b, v) in [(12.17, 12.52), (0.4, 0.47), (3.0, 1.0)] {
            let ppl = pct_improvement(b, v, MetricKind::Ppl).unwrap();
            let acc = pct_improvement(b, v, MetricKind::Acc).unwrap();
            assert_eq!(ppl, -acc);
        }
    }

    #[test]
    fn aggregation_examples() {
        assert_eq!(aggregate_improvements(&[2.0, -2.0]).unwrap(), 0.0);
        assert_eq!(aggregate_improvements(&[1.25]).unwrap(), 1.25);
        assert!(aggregate_improvements(&[]).is_err());
    }

    #[test]
    fn aggregation_ignores_benchmark_scale() {
        let base = [(12.0, 11.0), (0.3, 0.33), (40.0, 41.0)];
        let pcts: Vec<f64> = base
            .iter()
            .map(|&(b, v)| pct_improvement(b, v, MetricKind::Ppl).unwrap())
            .collect();
        let scaled: Vec<f64> = base
            .iter()
            .enumerate()
            .map(|(i, &(b, v))| {
                let k = if i == 1 { 1024.0 } else { 1.0 };
                pct_improvement(b * k, v * k, MetricKind::Ppl).unwrap()
            })
            .collect();
        assert_eq!(aggregate_improvements(&pcts).unwrap(), aggregate_improvements(&scaled).unwrap());
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 50.0, 100.0]);
        assert_eq!(minmax_normalize(&[4.0, 4.0]).unwrap(), vec![100.0, 100.0]);
        let n = minmax_normalize(&[0.3, -1.0, 2.5, 0.0, 1.1, 2.4]).unwrap();
        assert_eq!(n[2], 100.0);
        assert_eq!(n[1], 0.0);
        assert!(minmax_normalize(&[]).is_err());
    }

    fn cell(teacher: &str, alpha: f64, metrics: &[(&str, f64)]) -> AlphaCell {
        AlphaCell {
            teacher: teacher.into(),
            alpha,
            metrics: metrics.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
        }
    }

    #[test]
    fn best_alpha_modes_and_ties() {
        let peaks = |a: f64| {
            let ma = if a == 0.2 { 5.0 } else { 1.0 };
            let mb = if a == 0.8 { 4.0 } else if a == 0.6 { 3.9 } else { 0.0 };
            cell("t", a, &[("a", ma), ("b", mb)])
        };
        let cells: Vec<AlphaCell> = ALPHA_GRID.iter().map(|&a| peaks(a)).collect();
        let per = select_best_alpha(&cells, &ALPHA_GRID, SelectMode::PerMetric).unwrap();
        assert_eq!(per[&("t".into(), "a".into())], 0.2);
        assert_eq!(per[&("t".into(), "b".into())], 0.8);
        // means: 0.2 → 2.5, 0.6 → 2.45, 0.8 → 2.5; tie goes to 0.2
        let joint = select_best_alpha(&cells, &ALPHA_GRID, SelectMode::Joint).unwrap();
        assert_eq!(joint[&("t".into(), metric::JOINT.into())], 0.2);

        let tied: Vec<AlphaCell> = ALPHA_GRID
            .iter()
            .map(|&a| cell("u", a, &[("m", if a == 0.4 || a == 0.6 { 2.0 } else { 1.0 })]))
            .collect();
        let per = select_best_alpha(&tied, &ALPHA_GRID, SelectMode::PerMetric).unwrap();
        assert_eq!(per[&("u".into(), "m".into())], 0.4);

        let dominant: Vec<AlphaCell> = ALPHA_GRID
            .iter()
            .map(|&a| {
                let v = if a == 0.5 { 9.0 } else { a };
                cell("d", a, &[("x", v), ("y", v)])
            })
            .collect();
        let per = select_best_alpha(&dominant, &ALPHA_GRID, SelectMode::PerMetric).unwrap();
        let joint = select_best_alpha(&dominant, &ALPHA_GRID, SelectMode::Joint).unwrap();
        assert!(per.values().all(|&a| a == 0.5));
        assert_eq!(joint[&("d".into(), metric::JOINT.into())], 0.5);

        assert!(matches!(
            select_best_alpha(&cells[1..], &ALPHA_GRID, SelectMode::Joint),
            Err(Error::IncompleteGrid(_))
        ));
    }

    #[test]
    fn dimensions_split_in_domain_ood_and_mc() {
        let mut b = BTreeMap::new();
        b.insert(metric::ppl(HELD_OUT), 1.0);
        b.insert(metric::ppl("records"), 2.0);
        b.insert(metric::ppl("dialogue"), 4.0);
        b.insert(metric::acc("continuation_short"), -1.0);
        let d = dimension_improvements(&b).unwrap();
        assert_eq!(d[metric::IN_DOMAIN], 1.0);
        assert_eq!(d[metric::OOD], 3.0);
        assert_eq!(d[metric::MC], -1.0);
        assert_eq!(d[metric::JOINT], 1.5);
    }
}
