//! Sweep runner and table emission.
//!
//! A sweep trains every teacher once, the α = 0 baseline once and one
//! student per `(teacher, α)` pair, all students sharing the baseline's data
//! order. Each cell lives in its own directory under `cells/` and is marked
//! done by an atomically written `status.json`; re-running a sweep skips
//! every cell whose status, checkpoint and report are all present.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{build_pools, Pools, TokenPool};
use crate::error::{Error, Result};
use crate::evaluation::{
    benchmark_improvements, dimension_improvements, evaluate, metric, minmax_normalize, perplexity, select_best_alpha,
    synthetic_tasks, AlphaCell, EvalReport, MC_MAX_ANSWER_LEN, ImprovementRow, ImprovementTable, McTask, SelectMode,
};
use crate::model::{ModelConfig, ParameterSet};
use crate::synthetic::{generate, Style};
use crate::teacher::{CacheMode, TeacherLogitCache};
use crate::training::{
    train_observed, RunConfig, Role, StepObserver, TeacherLogits, TeacherSource, TrainOutcome,
};

/// A model configuration with its training budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub label: String,
    pub model: ModelConfig,
    pub token_budget: u64,
}

impl ModelSpec {
    /// Short architecture tag such as `L2-d64`.
    pub fn arch(&self) -> String {
        format!("L{}-d{}", self.model.num_layers, self.model.hidden_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CorpusSource {
    File { path: PathBuf },
    Synthetic { style: Style, bytes: usize, seed: u64 },
}

impl CorpusSource {
    pub fn load(&self) -> Result<Vec<u8>> {
        match self {
            CorpusSource::File { path } => fs::read(path).map_err(|e| Error::io(path, e)),
            CorpusSource::Synthetic { style, bytes, seed } => Ok(generate(*style, *seed, *bytes)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSource {
    pub name: String,
    pub source: CorpusSource,
}

fn default_held_out_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub train: CorpusSource,
    #[serde(default = "default_held_out_fraction")]
    pub held_out_fraction: f64,
    #[serde(default)]
    pub ood: Vec<NamedSource>,
}

fn default_mc_items() -> usize {
    40
}

fn default_mc_prompt_len() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Items per multiple-choice task; 0 skips the tasks.
    #[serde(default = "default_mc_items")]
    pub mc_items: usize,
    #[serde(default = "default_mc_prompt_len")]
    pub mc_prompt_len: usize,
    #[serde(default)]
    pub mc_seed: u64,
    /// Held-out perplexity every this many steps; `None` evaluates only at
    /// the end of a run.
    #[serde(default)]
    pub eval_every_steps: Option<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            mc_items: default_mc_items(),
            mc_prompt_len: default_mc_prompt_len(),
            mc_seed: 0,
            eval_every_steps: None,
        }
    }
}

/// Optimizer settings shared by every run of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub final_lr_frac: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub adam_eps: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        let r = RunConfig::new(Role::Baseline, ModelConfig::small(), 0);
        Self {
            batch_size: r.batch_size,
            peak_lr: r.peak_lr,
            warmup_frac: r.warmup_frac,
            final_lr_frac: r.final_lr_frac,
            betas: r.betas,
            weight_decay: r.weight_decay,
            clip_norm: r.clip_norm,
            adam_eps: r.adam_eps,
        }
    }
}

fn default_temperature() -> f64 {
    1.0
}

fn default_teacher_seed_offset() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub student: ModelSpec,
    pub teachers: Vec<ModelSpec>,
    pub alphas: Vec<f64>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub init_seed: u64,
    /// Teacher `i` uses seeds offset by `teacher_seed_offset + i`, so a
    /// teacher with the student's configuration is a different model.
    #[serde(default = "default_teacher_seed_offset")]
    pub teacher_seed_offset: u64,
    pub corpus: CorpusConfig,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default)]
    pub teacher_logits: TeacherLogits,
}

fn valid_label(label: &str) -> bool {
    !label.is_empty() && label.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl SweepConfig {
    /// The default desk grid: three teacher sizes at three budgets, a small
    /// student at 2M tokens and the paper's α grid.
    pub fn desk_default(corpus: CorpusConfig, output_dir: PathBuf) -> Self {
        let mut teachers = Vec::new();
        for (name, model) in [("tiny", ModelConfig::tiny()), ("small", ModelConfig::small()), ("medium", ModelConfig::medium())] {
            for (tag, budget) in [("0.5M", 500_000u64), ("2M", 2_000_000), ("8M", 8_000_000)] {
                teachers.push(ModelSpec {
                    label: format!("{name}-{tag}"),
                    model: model.clone(),
                    token_budget: budget,
                });
            }
        }
        Self {
            student: ModelSpec {
                label: "student".into(),
                model: ModelConfig::small(),
                token_budget: 2_000_000,
            },
            teachers,
            alphas: crate::evaluation::ALPHA_GRID.to_vec(),
            temperature: 1.0,
            data_seed: 0,
            init_seed: 0,
            teacher_seed_offset: default_teacher_seed_offset(),
            corpus,
            output_dir,
            eval: EvalSettings::default(),
            optimizer: OptimizerSettings::default(),
            teacher_logits: TeacherLogits::OnTheFly,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&fs::read(path).map_err(|e| Error::io(path, e))?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.teachers.is_empty() {
            return Err(Error::InvalidConfig("sweep needs at least one teacher".into()));
        }
        if self.alphas.is_empty() {
            return Err(Error::InvalidConfig("sweep needs at least one alpha".into()));
        }
        for &a in &self.alphas {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::InvalidConfig(format!("alpha {a} outside (0, 1]")));
            }
        }
        let distinct: BTreeSet<u64> = self.alphas.iter().map(|a| a.to_bits()).collect();
        if distinct.len() != self.alphas.len() {
            return Err(Error::InvalidConfig("alphas must be distinct".into()));
        }
        let mut labels = BTreeSet::new();
        for t in &self.teachers {
            if !valid_label(&t.label) || t.label == "baseline" {
                return Err(Error::InvalidConfig(format!(
                    "teacher label `{}` must be [A-Za-z0-9_.-]+ and not `baseline`",
                    t.label
                )));
            }
            if !labels.insert(t.label.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate teacher label `{}`", t.label)));
            }
            t.model.validate()?;
            if t.model.vocab_size != self.student.model.vocab_size {
                return Err(Error::VocabMismatch(format!("teacher `{}` vocabulary differs from the student's", t.label)));
            }
            if t.model.context_len < self.student.model.context_len {
                return Err(Error::InvalidConfig(format!(
                    "teacher `{}` context {} is shorter than the student's {}",
                    t.label, t.model.context_len, self.student.model.context_len
                )));
            }
        }
        self.student.model.validate()?;
        let mc_len = self.eval.mc_prompt_len + MC_MAX_ANSWER_LEN - 1;
        if self.eval.mc_items > 0 && mc_len > self.student.model.context_len {
            return Err(Error::InvalidConfig(format!(
                "multiple-choice prompt plus answer spans {mc_len} tokens, more than the student context {}",
                self.student.model.context_len
            )));
        }
        let mut pools = BTreeSet::new();
        for o in &self.corpus.ood {
            if !valid_label(&o.name) || o.name == crate::evaluation::HELD_OUT || !pools.insert(o.name.as_str()) {
                return Err(Error::InvalidConfig(format!("bad or duplicate OOD pool name `{}`", o.name)));
            }
        }
        for src in std::iter::once(&self.corpus.train).chain(self.corpus.ood.iter().map(|o| &o.source)) {
            if let CorpusSource::File { path } = src {
                if !path.is_file() {
                    return Err(Error::InvalidConfig(format!("corpus file {} does not exist", path.display())));
                }
            }
        }
        for run in self.plan().into_iter().map(|c| c.run) {
            let mut check = run.clone();
            if check.role == Role::Distill {
                check.teacher_checkpoint.get_or_insert_with(|| PathBuf::from("teacher.ckpt"));
            }
            check.validate()?;
        }
        Ok(())
    }

    fn run_for(&self, role: Role, spec: &ModelSpec, alpha: f64, seed_offset: u64) -> RunConfig {
        let mut run = RunConfig::new(role, spec.model.clone(), spec.token_budget);
        let o = &self.optimizer;
        run.data_seed = self.data_seed.wrapping_add(seed_offset);
        run.init_seed = self.init_seed.wrapping_add(seed_offset);
        run.alpha = alpha;
        run.temperature = self.temperature;
        run.batch_size = o.batch_size;
        run.peak_lr = o.peak_lr;
        run.warmup_frac = o.warmup_frac;
        run.final_lr_frac = o.final_lr_frac;
        run.betas = o.betas;
        run.weight_decay = o.weight_decay;
        run.clip_norm = o.clip_norm;
        run.adam_eps = o.adam_eps;
        run.teacher_logits = self.teacher_logits;
        run
    }

    /// Every cell of the grid, teachers first, then the baseline, then the
    /// students in teacher-major, ascending-α order.
    pub fn plan(&self) -> Vec<CellSpec> {
        let mut cells = Vec::new();
        for (i, t) in self.teachers.iter().enumerate() {
            let offset = self.teacher_seed_offset.wrapping_add(i as u64);
            cells.push(CellSpec {
                id: format!("teacher__{}", t.label),
                kind: CellKind::Teacher { label: t.label.clone() },
                run: self.run_for(Role::Teacher, t, 0.0, offset),
            });
        }
        cells.push(CellSpec {
            id: "baseline".into(),
            kind: CellKind::Baseline,
            run: self.run_for(Role::Baseline, &self.student, 0.0, 0),
        });
        let mut alphas = self.alphas.clone();
        alphas.sort_by(f64::total_cmp);
        for t in &self.teachers {
            for &a in &alphas {
                let mut run = self.run_for(Role::Distill, &self.student, a, 0);
                run.teacher_checkpoint = Some(
                    self.cell_dir(&format!("teacher__{}", t.label)).join(CHECKPOINT_FILE),
                );
                cells.push(CellSpec {
                    id: format!("distill__{}__a{}", t.label, a),
                    kind: CellKind::Distill {
                        teacher: t.label.clone(),
                        alpha: a,
                    },
                    run,
                });
            }
        }
        cells
    }

    pub fn cell_dir(&self, id: &str) -> PathBuf {
        self.output_dir.join("cells").join(id)
    }

    pub fn teacher(&self, label: &str) -> Option<&ModelSpec> {
        self.teachers.iter().find(|t| t.label == label)
    }
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const STATUS_FILE: &str = "status.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const CURVE_FILE: &str = "eval_curve.csv";
pub const CONFIG_FILE: &str = "sweep_config.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CellKind {
    Teacher { label: String },
    Baseline,
    Distill { teacher: String, alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub id: String,
    pub kind: CellKind,
    pub run: RunConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellState {
    Completed,
    Failed,
}

/// Terminal record of one cell, written last and atomically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStatus {
    pub id: String,
    pub state: CellState,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub steps: usize,
    #[serde(default)]
    pub final_loss: Option<f64>,
    #[serde(default)]
    pub seconds: f64,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_status(dir: &Path) -> Option<CellStatus> {
    let bytes = fs::read(dir.join(STATUS_FILE)).ok()?;
    serde_json::from_slice(&bytes).ok()
}

fn is_complete(dir: &Path) -> bool {
    matches!(read_status(dir), Some(s) if s.state == CellState::Completed)
        && dir.join(CHECKPOINT_FILE).is_file()
        && dir.join(REPORT_FILE).is_file()
}

/// Which cells to run.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum CellFilter {
    #[default]
    All,
    /// One distillation cell (plus its teacher and the baseline if they
    /// are not done yet).
    Distill { teacher: String, alpha: f64 },
    /// One teacher cell.
    Teacher(String),
    Baseline,
}

impl CellFilter {
    /// Parses `label:alpha`, `label` (a teacher) or `baseline`.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "baseline" {
            return Ok(CellFilter::Baseline);
        }
        match s.split_once(':') {
            Some((label, alpha)) => {
                let alpha: f64 = alpha
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad alpha in cell selector `{s}`")))?;
                if alpha == 0.0 {
                    return Ok(CellFilter::Baseline);
                }
                Ok(CellFilter::Distill {
                    teacher: label.to_string(),
                    alpha,
                })
            }
            None => Ok(CellFilter::Teacher(s.to_string())),
        }
    }

    fn wants(&self, kind: &CellKind) -> bool {
        match (self, kind) {
            (CellFilter::All, _) => true,
            (CellFilter::Baseline, CellKind::Baseline) => true,
            (CellFilter::Teacher(l), CellKind::Teacher { label }) => l == label,
            (CellFilter::Distill { teacher, alpha }, CellKind::Distill { teacher: t, alpha: a }) => {
                teacher == t && alpha == a
            }
            (CellFilter::Distill { teacher, .. }, CellKind::Teacher { label }) => teacher == label,
            (CellFilter::Distill { .. }, CellKind::Baseline) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub workers: usize,
    pub filter: CellFilter,
    pub retry_failed: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            filter: CellFilter::All,
            retry_failed: false,
        }
    }
}

/// Data shared read-only by every cell.
pub struct SweepData {
    pub pools: Pools,
    pub tasks: Vec<McTask>,
}

impl SweepData {
    pub fn build(cfg: &SweepConfig) -> Result<Self> {
        Self::from_corpus(&cfg.corpus, &cfg.eval, cfg.student.model.context_len)
    }

    pub fn from_corpus(corpus: &CorpusConfig, eval: &EvalSettings, context_len: usize) -> Result<Self> {
        let text = corpus.train.load()?;
        let ood = corpus
            .ood
            .iter()
            .map(|o| Ok((o.name.clone(), o.source.load()?)))
            .collect::<Result<Vec<_>>>()?;
        let pools = build_pools(&text, corpus.held_out_fraction, 0, context_len, &ood)?;
        let tasks = if eval.mc_items == 0 {
            Vec::new()
        } else {
            synthetic_tasks(&pools.held_out, eval.mc_prompt_len, eval.mc_items, eval.mc_seed)?
        };
        Ok(Self { pools, tasks })
    }

    pub fn eval_pools(&self) -> Vec<&TokenPool> {
        self.pools.eval_pools().collect()
    }
}

/// One cell's stored outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub spec: CellSpec,
    pub status: Option<CellStatus>,
    pub report: Option<EvalReport>,
}

impl CellRecord {
    pub fn completed(&self) -> bool {
        matches!(&self.status, Some(s) if s.state == CellState::Completed) && self.report.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub config: SweepConfig,
    pub cells: Vec<CellRecord>,
    /// Cells trained by the invocation that produced this result.
    pub executed: Vec<String>,
}

impl SweepResult {
    /// Reads every cell's status and report from `output_dir`.
    pub fn load(output_dir: &Path) -> Result<Self> {
        let config = SweepConfig::load(&output_dir.join(CONFIG_FILE))?;
        let mut config = config;
        config.output_dir = output_dir.to_path_buf();
        let cells = config
            .plan()
            .into_iter()
            .map(|spec| {
                let dir = config.cell_dir(&spec.id);
                let status = read_status(&dir);
                let report_path = dir.join(REPORT_FILE);
                let report = if report_path.is_file() {
                    Some(EvalReport::load(&report_path)?)
                } else {
                    None
                };
                Ok(CellRecord { spec, status, report })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            cells,
            executed: Vec::new(),
        })
    }

    pub fn cell(&self, id: &str) -> Option<&CellRecord> {
        self.cells.iter().find(|c| c.spec.id == id)
    }

    pub fn baseline_report(&self) -> Option<&EvalReport> {
        self.cell("baseline").filter(|c| c.completed()).and_then(|c| c.report.as_ref())
    }

    /// Completed distillation cells of `teacher`, ascending α.
    pub fn distill_cells(&self, teacher: &str) -> Vec<(f64, &EvalReport)> {
        self.cells
            .iter()
            .filter(|c| c.completed())
            .filter_map(|c| match &c.spec.kind {
                CellKind::Distill { teacher: t, alpha } if t == teacher => Some((*alpha, c.report.as_ref()?)),
                _ => None,
            })
            .collect()
    }
}

/// One training job and where its outputs go.
#[derive(Debug, Clone)]
pub struct CellJob<'a> {
    pub id: &'a str,
    pub run: &'a RunConfig,
    pub dir: &'a Path,
    /// Window length for held-out and final evaluation.
    pub eval_context: usize,
    pub eval_every_steps: Option<usize>,
}

/// Where a distillation run keeps (or finds) its teacher's logit cache:
/// next to the teacher checkpoint, keyed by data seed and cache mode.
pub fn logit_cache_path(run: &RunConfig) -> Option<PathBuf> {
    let TeacherLogits::Cached { top_k } = run.teacher_logits else {
        return None;
    };
    let teacher = run.teacher_checkpoint.as_ref()?;
    Some(teacher.with_file_name(format!(
        "logits_seed{}_{}.bin",
        run.data_seed,
        top_k.map_or("full".to_string(), |k| format!("top{k}"))
    )))
}

/// Loads a compatible logit cache for `run` or builds and saves one.
pub fn ensure_logit_cache(
    run: &RunConfig,
    teacher: &ParameterSet<f32>,
    pool: &TokenPool,
) -> Result<Option<TeacherLogitCache<f32>>> {
    let (Some(path), TeacherLogits::Cached { top_k }) = (logit_cache_path(run), run.teacher_logits) else {
        return Ok(None);
    };
    if let Ok(c) = TeacherLogitCache::load(&path) {
        if c.check_compatible(run, pool).is_ok() {
            return Ok(Some(c));
        }
    }
    info!("building teacher logit cache {}", path.display());
    let c = TeacherLogitCache::build(teacher, run, pool, top_k.map_or(CacheMode::Full, CacheMode::TopK))?;
    c.save(&path)?;
    Ok(Some(c))
}

fn load_teacher(run: &RunConfig) -> Result<ParameterSet<f32>> {
    let path = run
        .teacher_checkpoint
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("distillation needs a teacher checkpoint".into()))?;
    checkpoint::load(path).map_err(|e| Error::InvalidConfig(format!("teacher {} unavailable: {e}", path.display())))
}

fn train_job(job: &CellJob, data: &SweepData) -> Result<(TrainOutcome<f32>, Vec<(usize, f64)>)> {
    let run = job.run;
    let mut curve = Vec::new();
    let mut eval_hook = |step: usize, params: &ParameterSet<f32>| -> Result<()> {
        curve.push((step, perplexity(params, &data.pools.held_out, job.eval_context)?.perplexity));
        Ok(())
    };
    let observer = job.eval_every_steps.map(|every| StepObserver {
        every,
        callback: &mut eval_hook,
    });
    let pool = &data.pools.train;
    let outcome = match run.role {
        Role::Teacher | Role::Baseline => train_observed::<f32>(run, pool, None, observer)?,
        Role::Distill => {
            let teacher = load_teacher(run)?;
            match ensure_logit_cache(run, &teacher, pool)? {
                Some(cache) => train_observed(run, pool, Some(TeacherSource::Cached(&cache)), observer)?,
                None => train_observed(run, pool, Some(TeacherSource::Live(&teacher)), observer)?,
            }
        }
    };
    Ok((outcome, curve))
}

/// Trains, checkpoints and evaluates one run, then writes its terminal
/// status. Training and evaluation failures are recorded in the status;
/// only a failure to write the status itself is returned as an error.
pub fn run_cell(job: &CellJob, data: &SweepData) -> Result<CellStatus> {
    let dir = job.dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let _ = fs::remove_file(dir.join(STATUS_FILE));
    let started = Instant::now();
    info!("cell {}: training {} steps", job.id, job.run.total_steps());
    let result = train_job(job, data).and_then(|(outcome, curve)| {
        checkpoint::save(&outcome.params, &dir.join(CHECKPOINT_FILE))?;
        outcome.log.save_csv(&dir.join(LOG_FILE))?;
        if !curve.is_empty() {
            let mut csv = String::from("step,held_out_ppl\n");
            for (step, ppl) in &curve {
                let _ = writeln!(csv, "{step},{ppl}");
            }
            write_atomic(&dir.join(CURVE_FILE), csv.as_bytes())?;
        }
        let report = evaluate(&outcome.params, job.id, &data.eval_pools(), &data.tasks, job.eval_context)?;
        report.save(&dir.join(REPORT_FILE))?;
        Ok(outcome)
    });
    let seconds = started.elapsed().as_secs_f64();
    let status = match result {
        Ok(outcome) => CellStatus {
            id: job.id.to_string(),
            state: CellState::Completed,
            error: None,
            steps: outcome.log.rows.len(),
            final_loss: outcome.log.final_loss(),
            seconds,
        },
        Err(e) => {
            warn!("cell {} failed: {e}", job.id);
            CellStatus {
                id: job.id.to_string(),
                state: CellState::Failed,
                error: Some(e.to_string()),
                steps: 0,
                final_loss: None,
                seconds,
            }
        }
    };
    write_atomic(&dir.join(STATUS_FILE), &serde_json::to_vec_pretty(&status)?)?;
    Ok(status)
}

fn execute_cell(cfg: &SweepConfig, data: &SweepData, spec: &CellSpec) -> Result<CellStatus> {
    let dir = cfg.cell_dir(&spec.id);
    let job = CellJob {
        id: &spec.id,
        run: &spec.run,
        dir: &dir,
        eval_context: cfg.student.model.context_len,
        eval_every_steps: cfg.eval.eval_every_steps,
    };
    run_cell(&job, data)
}

fn run_parallel(cfg: &SweepConfig, data: &SweepData, cells: &[&CellSpec], workers: usize) -> Result<Vec<CellStatus>> {
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::new());
    let fatal = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1).min(cells.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(spec) = cells.get(i) else { break };
                match execute_cell(cfg, data, spec) {
                    Ok(s) => results.lock().expect("results lock").push((i, s)),
                    Err(e) => {
                        *fatal.lock().expect("fatal lock") = Some(e);
                        break;
                    }
                }
            });
        }
    });
    if let Some(e) = fatal.into_inner().expect("fatal lock") {
        return Err(e);
    }
    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|(i, _)| *i);
    Ok(results.into_iter().map(|(_, s)| s).collect())
}

/// Builds each needed logit cache once, serially, so parallel students of
/// one teacher never race to write the same file. Failures are left for
/// the cells themselves to record.
fn prepare_logit_caches(cells: &[&CellSpec], data: &SweepData) {
    let mut seen = BTreeSet::new();
    for spec in cells {
        let Some(path) = logit_cache_path(&spec.run) else { continue };
        if !seen.insert(path) {
            continue;
        }
        if let Err(e) = load_teacher(&spec.run).and_then(|t| ensure_logit_cache(&spec.run, &t, &data.pools.train)) {
            warn!("logit cache for {} not built: {e}", spec.id);
        }
    }
}

/// Trains and evaluates every pending cell selected by `opts.filter`.
pub fn run_sweep(cfg: &SweepConfig, opts: &SweepOptions) -> Result<SweepResult> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write_atomic(&cfg.output_dir.join(CONFIG_FILE), &serde_json::to_vec_pretty(cfg)?)?;
    let plan = cfg.plan();
    let pending = |spec: &CellSpec| {
        let dir = cfg.cell_dir(&spec.id);
        if is_complete(&dir) {
            return false;
        }
        match read_status(&dir) {
            Some(s) if s.state == CellState::Failed && !opts.retry_failed => false,
            _ => true,
        }
    };
    let selected: Vec<&CellSpec> = plan.iter().filter(|c| opts.filter.wants(&c.kind) && pending(c)).collect();
    let mut executed = Vec::new();
    if !selected.is_empty() {
        let data = SweepData::build(cfg)?;
        let (first, second): (Vec<&CellSpec>, Vec<&CellSpec>) =
            selected.iter().partition(|c| !matches!(c.kind, CellKind::Distill { .. }));
        for (n, phase) in [first, second].into_iter().enumerate() {
            if phase.is_empty() {
                continue;
            }
            if n == 1 {
                prepare_logit_caches(&phase, &data);
            }
            for status in run_parallel(cfg, &data, &phase, opts.workers)? {
                executed.push(status.id);
            }
        }
    }
    let mut result = SweepResult::load(&cfg.output_dir)?;
    result.executed = executed;
    Ok(result)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Dimension metrics reported per teacher: in-domain, OOD, MC.
fn dimension_keys(report: &EvalReport) -> Vec<&'static str> {
    let mut keys = vec![metric::IN_DOMAIN];
    if report.perplexities.len() > 1 {
        keys.push(metric::OOD);
    }
    if report.accuracies.values().any(|&a| a > 0.0) {
        keys.push(metric::MC);
    }
    keys
}

/// Per-teacher data used by several tables.
struct TeacherGrid<'a> {
    spec: &'a ModelSpec,
    /// α → (benchmark pcts, dimension pcts); only completed cells.
    cells: Vec<(f64, BTreeMap<String, f64>, BTreeMap<String, f64>)>,
    complete: bool,
}

fn teacher_grids<'a>(result: &'a SweepResult, baseline: &EvalReport) -> Result<Vec<TeacherGrid<'a>>> {
    result
        .config
        .teachers
        .iter()
        .map(|spec| {
            let mut cells = Vec::new();
            for (alpha, report) in result.distill_cells(&spec.label) {
                let bench = benchmark_improvements(baseline, report)?;
                let dims = dimension_improvements(&bench)?;
                cells.push((alpha, bench, dims));
            }
            let complete = result
                .config
                .alphas
                .iter()
                .all(|a| cells.iter().any(|(b, _, _)| b == a));
            Ok(TeacherGrid { spec, cells, complete })
        })
        .collect()
}

/// Writes every table under `<output_dir>/tables` and the manifest; returns
/// the written paths.
pub fn emit_tables(result: &SweepResult) -> Result<Vec<PathBuf>> {
    let out = result.config.output_dir.join("tables");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let path = out.join(name);
        write_atomic(&path, body.as_bytes())?;
        written.push(path);
        Ok(())
    };

    let mut status_csv = String::from("cell,kind,state,error\n");
    for c in &result.cells {
        let kind = match &c.spec.kind {
            CellKind::Teacher { .. } => "teacher",
            CellKind::Baseline => "baseline",
            CellKind::Distill { .. } => "distill",
        };
        let (state, error) = match &c.status {
            Some(s) if s.state == CellState::Completed => ("completed", String::new()),
            Some(s) => ("failed", s.error.clone().unwrap_or_default().replace([',', '\n'], ";")),
            None => ("missing", String::new()),
        };
        let _ = writeln!(status_csv, "{},{kind},{state},{error}", c.spec.id);
    }
    put("status.csv", status_csv)?;

    let mut teacher_csv = String::from("teacher_label,arch,tokens,pool_or_task,value\n");
    for t in &result.config.teachers {
        if let Some(report) = result.cell(&format!("teacher__{}", t.label)).filter(|c| c.completed()).and_then(|c| c.report.as_ref()) {
            for (k, v) in report.perplexities.iter().chain(&report.accuracies) {
                let _ = writeln!(teacher_csv, "{},{},{},{k},{v}", t.label, t.arch(), t.token_budget);
            }
        }
    }
    put("teachers.csv", teacher_csv)?;

    let Some(baseline) = result.baseline_report() else {
        warn!("baseline missing; improvement tables left empty");
        for name in ["improvements.csv", "best_alpha.csv", "heatmap.csv", "trend.csv", "joint_alpha.csv"] {
            put(name, String::new())?;
        }
        write_manifest(result, &written)?;
        return Ok(written);
    };
    let grids = teacher_grids(result, baseline)?;

    let mut table = ImprovementTable {
        baseline_id: baseline.model_id.clone(),
        rows: Vec::new(),
    };
    for g in &grids {
        for (alpha, bench, dims) in &g.cells {
            for (m, &pct) in bench.iter().chain(dims) {
                table.rows.push(ImprovementRow {
                    teacher_label: g.spec.label.clone(),
                    tokens: g.spec.token_budget,
                    alpha: *alpha,
                    metric: m.clone(),
                    pct,
                });
            }
        }
    }
    put("improvements.csv", table.to_csv())?;

    let keys = dimension_keys(baseline);
    let required = &result.config.alphas;

    // best α per teacher and dimension, with row (same architecture) and
    // column (same budget) winners marked
    let mut best: Vec<(usize, &str, Option<(f64, f64)>)> = Vec::new();
    for (gi, g) in grids.iter().enumerate() {
        let alpha_cells: Vec<AlphaCell> = g
            .cells
            .iter()
            .map(|(a, _, dims)| AlphaCell {
                teacher: g.spec.label.clone(),
                alpha: *a,
                metrics: keys.iter().map(|k| (k.to_string(), dims[*k])).collect(),
            })
            .collect();
        let chosen = if g.complete {
            Some(select_best_alpha(&alpha_cells, required, SelectMode::PerMetric)?)
        } else {
            None
        };
        for &k in &keys {
            let entry = chosen.as_ref().map(|c| {
                let a = c[&(g.spec.label.clone(), k.to_string())];
                let pct = g.cells.iter().find(|(b, _, _)| *b == a).expect("chosen alpha present").2[k];
                (a, pct)
            });
            best.push((gi, k, entry));
        }
    }
    let winner = |gi: usize, k: &str, same: &dyn Fn(&ModelSpec, &ModelSpec) -> bool| -> bool {
        let Some((_, mine)) = best.iter().find(|(g, m, _)| *g == gi && *m == k).and_then(|b| b.2) else {
            return false;
        };
        best.iter()
            .filter(|(g, m, e)| *m == k && e.is_some() && same(grids[*g].spec, grids[gi].spec))
            .all(|(_, _, e)| e.expect("filtered").1 <= mine)
    };
    let mut best_csv = String::from("teacher_label,arch,tokens,metric,best_alpha,pct,row_best,col_best,note\n");
    for &(gi, k, entry) in &best {
        let s = grids[gi].spec;
        let row_best = winner(gi, k, &|a, b| a.arch() == b.arch());
        let col_best = winner(gi, k, &|a, b| a.token_budget == b.token_budget);
        let note = if entry.is_some() { "" } else { "incomplete grid" };
        let _ = writeln!(
            best_csv,
            "{},{},{},{k},{},{},{row_best},{col_best},{note}",
            s.label,
            s.arch(),
            s.token_budget,
            fmt_opt(entry.map(|e| e.0)),
            fmt_opt(entry.map(|e| e.1)),
        );
    }
    put("best_alpha.csv", best_csv)?;

    let mut sorted_alphas = required.clone();
    sorted_alphas.sort_by(f64::total_cmp);
    let mut heat = String::from("teacher_label,tokens,metric,alpha,pct,normalized,note\n");
    for g in &grids {
        for &k in &keys {
            let present: Vec<f64> = g.cells.iter().map(|(_, _, d)| d[k]).collect();
            let normalized = if present.is_empty() { Vec::new() } else { minmax_normalize(&present)? };
            for &a in &sorted_alphas {
                match g.cells.iter().position(|(b, _, _)| *b == a) {
                    Some(i) => {
                        let _ = writeln!(heat, "{},{},{k},{a},{},{},", g.spec.label, g.spec.token_budget, present[i], normalized[i]);
                    }
                    None => {
                        let _ = writeln!(heat, "{},{},{k},{a},,,missing cell", g.spec.label, g.spec.token_budget);
                    }
                }
            }
        }
    }
    put("heatmap.csv", heat)?;

    let mut trend = String::from("arch,tokens,teacher_label,metric,best_pct,mean_pct\n");
    let mut order: Vec<usize> = (0..grids.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (grids[a].spec, grids[b].spec);
        (x.arch(), x.token_budget).cmp(&(y.arch(), y.token_budget))
    });
    for gi in order {
        let g = &grids[gi];
        for &k in &keys {
            let entry = best.iter().find(|(b, m, _)| *b == gi && *m == k).and_then(|b| b.2);
            let values: Vec<f64> = g.cells.iter().map(|(_, _, d)| d[k]).collect();
            let mean = (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
            let _ = writeln!(
                trend,
                "{},{},{},{k},{},{}",
                g.spec.arch(),
                g.spec.token_budget,
                g.spec.label,
                fmt_opt(entry.map(|e| e.1)),
                fmt_opt(mean)
            );
        }
    }
    put("trend.csv", trend)?;

    if required.contains(&1.0) {
        let mut pure = String::from("teacher_label,tokens,metric,alpha1_pct,best_alpha,best_pct,difference\n");
        for (gi, g) in grids.iter().enumerate() {
            for &k in &keys {
                let entry = best.iter().find(|(b, m, _)| *b == gi && *m == k).and_then(|b| b.2);
                let pure_kd = g.cells.iter().find(|(a, _, _)| *a == 1.0).map(|(_, _, d)| d[k]);
                let diff = match (pure_kd, entry) {
                    (Some(p), Some((_, b))) => Some(p - b),
                    _ => None,
                };
                let _ = writeln!(
                    pure,
                    "{},{},{k},{},{},{},{}",
                    g.spec.label,
                    g.spec.token_budget,
                    fmt_opt(pure_kd),
                    fmt_opt(entry.map(|e| e.0)),
                    fmt_opt(entry.map(|e| e.1)),
                    fmt_opt(diff)
                );
            }
        }
        put("pure_kd.csv", pure)?;
    }

    let mut joint = String::from("teacher_label,tokens,joint_alpha,joint_pct");
    for k in &keys {
        let _ = write!(joint, ",{k}");
    }
    joint.push('\n');
    for g in &grids {
        let cells: Vec<AlphaCell> = g
            .cells
            .iter()
            .map(|(a, bench, _)| AlphaCell {
                teacher: g.spec.label.clone(),
                alpha: *a,
                metrics: bench.clone(),
            })
            .collect();
        let chosen = if g.complete {
            Some(select_best_alpha(&cells, required, SelectMode::Joint)?[&(g.spec.label.clone(), metric::JOINT.to_string())])
        } else {
            None
        };
        let dims = chosen.and_then(|a| g.cells.iter().find(|(b, _, _)| *b == a)).map(|c| &c.2);
        let _ = write!(
            joint,
            "{},{},{},{}",
            g.spec.label,
            g.spec.token_budget,
            fmt_opt(chosen),
            fmt_opt(dims.map(|d| d[metric::JOINT]))
        );
        for k in &keys {
            let _ = write!(joint, ",{}", fmt_opt(dims.map(|d| d[*k])));
        }
        joint.push('\n');
    }
    put("joint_alpha.csv", joint)?;

    write_manifest(result, &written)?;
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: String,
    pub cells: BTreeMap<String, String>,
    pub tables: Vec<String>,
}

fn write_manifest(result: &SweepResult, tables: &[PathBuf]) -> Result<()> {
    let root = &result.config.output_dir;
    let rel = |p: &Path| p.strip_prefix(root).unwrap_or(p).to_string_lossy().into_owned();
    let manifest = Manifest {
        tool: "kdlab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: CONFIG_FILE.into(),
        cells: result
            .cells
            .iter()
            .map(|c| {
                let state = match &c.status {
                    Some(s) if s.state == CellState::Completed => "completed",
                    Some(_) => "failed",
                    None => "missing",
                };
                (c.spec.id.clone(), state.to_string())
            })
            .collect(),
        tables: tables.iter().map(|p| rel(p)).collect(),
    };
    write_atomic(&root.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)
}
