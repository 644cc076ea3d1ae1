use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use kdlab::checkpoint;
use kdlab::evaluation::{evaluate, HELD_OUT};
use kdlab::mechanism::{
    collect_records, mechanism_report, write_records, DifficultyBins, RecordHeader, DEFAULT_RECORD_CAP, DEFAULT_TOP_K,
};
use kdlab::orchestration::{
    emit_tables, run_cell, run_sweep, CellFilter, CellJob, CellState, CorpusConfig, EvalSettings, SweepConfig,
    SweepData, SweepOptions, SweepResult, CHECKPOINT_FILE, CONFIG_FILE,
};
use kdlab::training::{RunConfig, Role};
use kdlab::ParameterSet32;

#[derive(Parser)]
#[command(name = "kdlab", version, about = "Knowledge-distillation pretraining at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher or baseline model from scratch.
    Train(Common),
    /// Train a student against a frozen teacher checkpoint.
    Distill(Common),
    /// Evaluate a checkpoint on held-out, OOD and multiple-choice data.
    Eval(Common),
    /// Run the teacher × α grid.
    Sweep(Common),
    /// Collect per-token records and run the mechanism analyses.
    Analyze(Common),
    /// Rebuild the tables of a finished or partial sweep.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel training workers (sweep only).
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Overrides the configured seed(s).
    #[arg(long)]
    seed: Option<u64>,
    /// Single cell as `teacher_label:alpha`; alpha 0 selects the baseline.
    #[arg(long)]
    cell: Option<String>,
}

impl Common {
    fn config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        let path = self.config.as_ref().context("--config is required for this command")?;
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().context("--out is required for this command")
    }
}

/// Config of `train` and `distill`.
#[derive(Debug, Serialize, Deserialize)]
struct TrainConfig {
    run: RunConfig,
    corpus: CorpusConfig,
    #[serde(default)]
    eval: EvalSettings,
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalConfig {
    checkpoint: PathBuf,
    corpus: CorpusConfig,
    #[serde(default)]
    eval: EvalSettings,
    /// Evaluation window; defaults to the model's context length.
    #[serde(default)]
    context_len: Option<usize>,
    #[serde(default)]
    model_id: Option<String>,
}

fn default_resamples() -> usize {
    1000
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

fn default_cap() -> usize {
    DEFAULT_RECORD_CAP
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct AnalyzeConfig {
    /// Sweep directory to take models and corpus from, with `--cell`.
    #[serde(default)]
    sweep_dir: Option<PathBuf>,
    #[serde(default)]
    baseline: Option<PathBuf>,
    #[serde(default)]
    student: Option<PathBuf>,
    #[serde(default)]
    teacher: Option<PathBuf>,
    #[serde(default)]
    corpus: Option<CorpusConfig>,
    /// Pool to analyze; the held-out split by default.
    #[serde(default)]
    pool: Option<String>,
    #[serde(default = "default_top_k")]
    top_k: usize,
    #[serde(default = "default_cap")]
    record_cap: usize,
    /// Entropy bin edges; scaled to the vocabulary by default.
    #[serde(default)]
    bins: Option<DifficultyBins>,
    #[serde(default = "default_resamples")]
    resamples: usize,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a C,
    outputs: Vec<String>,
}

fn write_manifest<C: Serialize>(out: &Path, command: &str, config: &C, outputs: &[&str]) -> Result<()> {
    let manifest = Manifest {
        tool: "kdlab",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    let path = out.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))
}

fn train(args: &Common, distill: bool) -> Result<()> {
    let mut cfg: TrainConfig = args.config()?;
    let out = args.out()?;
    if let Some(seed) = args.seed {
        cfg.run.data_seed = seed;
        cfg.run.init_seed = seed;
    }
    match (distill, cfg.run.role) {
        (true, Role::Distill) | (false, Role::Teacher | Role::Baseline) => {}
        (true, role) => bail!("`distill` needs role distill, config has {role:?}"),
        (false, role) => bail!("`train` needs role teacher or baseline, config has {role:?}; use `distill`"),
    }
    cfg.run.validate()?;
    let data = SweepData::from_corpus(&cfg.corpus, &cfg.eval, cfg.run.model.context_len)?;
    let id = out.file_name().map_or("run".into(), |n| n.to_string_lossy().into_owned());
    let job = CellJob {
        id: &id,
        run: &cfg.run,
        dir: out,
        eval_context: cfg.run.model.context_len,
        eval_every_steps: cfg.eval.eval_every_steps,
    };
    let status = run_cell(&job, &data)?;
    write_manifest(
        out,
        if distill { "distill" } else { "train" },
        &cfg,
        &["model.ckpt", "train_log.csv", "report.json", "status.json"],
    )?;
    match status.state {
        CellState::Completed => {
            info!("finished {} steps, final loss {:?}", status.steps, status.final_loss);
            Ok(())
        }
        CellState::Failed => bail!("training failed: {}", status.error.unwrap_or_default()),
    }
}

fn eval(args: &Common) -> Result<()> {
    let cfg: EvalConfig = args.config()?;
    let out = args.out()?;
    let params: ParameterSet32 = checkpoint::load(&cfg.checkpoint)?;
    let ctx = cfg.context_len.unwrap_or(params.config().context_len);
    let data = SweepData::from_corpus(&cfg.corpus, &cfg.eval, ctx)?;
    let id = cfg
        .model_id
        .clone()
        .unwrap_or_else(|| cfg.checkpoint.display().to_string());
    let report = evaluate(&params, &id, &data.eval_pools(), &data.tasks, ctx)?;
    fs::create_dir_all(out)?;
    report.save(&out.join("report.json"))?;
    write_manifest(out, "eval", &cfg, &["report.json"])?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn sweep(args: &Common) -> Result<()> {
    let mut cfg: SweepConfig = args.config()?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.data_seed = seed;
        cfg.init_seed = seed;
    }
    let opts = SweepOptions {
        workers: args.workers,
        filter: match &args.cell {
            Some(c) => CellFilter::parse(c)?,
            None => CellFilter::All,
        },
        retry_failed: false,
    };
    let result = run_sweep(&cfg, &opts)?;
    info!("trained {} cell(s)", result.executed.len());
    emit_tables(&result)?;
    let failed: Vec<&str> = result
        .cells
        .iter()
        .filter(|c| matches!(&c.status, Some(s) if s.state == CellState::Failed))
        .map(|c| c.spec.id.as_str())
        .collect();
    if !failed.is_empty() {
        eprintln!("failed cells: {}", failed.join(", "));
    }
    Ok(())
}

fn report(args: &Common) -> Result<()> {
    let dir = args
        .out
        .clone()
        .or_else(|| {
            args.config
                .as_ref()
                .and_then(|c| SweepConfig::load(c).ok())
                .map(|c| c.output_dir)
        })
        .context("--out <sweep dir> or --config <sweep config> is required")?;
    if !dir.join(CONFIG_FILE).is_file() {
        bail!("{} is not a sweep directory", dir.display());
    }
    let result = SweepResult::load(&dir)?;
    for path in emit_tables(&result)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn analyze(args: &Common) -> Result<()> {
    let mut cfg: AnalyzeConfig = args.config()?;
    let out = args.out()?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let mut corpus = cfg.corpus.clone();
    let mut context = None;
    if let Some(cell) = &args.cell {
        let dir = cfg.sweep_dir.clone().context("--cell needs `sweep_dir` in the analyze config")?;
        let sweep = SweepConfig::load(&dir.join(CONFIG_FILE))?;
        let CellFilter::Distill { teacher, alpha } = CellFilter::parse(cell)? else {
            bail!("--cell must name a distillation cell as label:alpha");
        };
        let ckpt = |id: String| dir.join("cells").join(id).join(CHECKPOINT_FILE);
        cfg.baseline = Some(ckpt("baseline".into()));
        cfg.student = Some(ckpt(format!("distill__{teacher}__a{alpha}")));
        cfg.teacher = Some(ckpt(format!("teacher__{teacher}")));
        corpus.get_or_insert(sweep.corpus);
        context = Some(sweep.student.model.context_len);
    }
    let load = |p: &Option<PathBuf>, what: &str| -> Result<ParameterSet32> {
        let p = p.as_ref().with_context(|| format!("no {what} checkpoint given"))?;
        checkpoint::load(p).with_context(|| format!("loading {what} {}", p.display()))
    };
    let baseline = load(&cfg.baseline, "baseline")?;
    let student = load(&cfg.student, "student")?;
    let teacher = load(&cfg.teacher, "teacher")?;
    let ctx = context.unwrap_or(baseline.config().context_len);
    let corpus = corpus.context("no corpus given")?;
    let eval = EvalSettings {
        mc_items: 0,
        ..EvalSettings::default()
    };
    let data = SweepData::from_corpus(&corpus, &eval, ctx)?;
    let name = cfg.pool.clone().unwrap_or_else(|| HELD_OUT.to_string());
    let pool = data
        .eval_pools()
        .into_iter()
        .find(|p| p.pool_id() == name)
        .with_context(|| format!("no pool named `{name}`"))?;
    let vocab = baseline.config().vocab_size;
    let records = collect_records(&baseline, &student, &teacher, pool, ctx, cfg.top_k, cfg.record_cap)?;
    info!("collected {} records from `{name}`", records.len());
    fs::create_dir_all(out)?;
    let label = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    let header = RecordHeader::new(
        vocab,
        cfg.top_k,
        ctx,
        &label(&cfg.baseline),
        &label(&cfg.student),
        &label(&cfg.teacher),
    );
    write_records(&out.join("records.jsonl.gz"), &header, &records)?;
    let bins = cfg.bins.unwrap_or_else(|| DifficultyBins::desk(vocab));
    let report = mechanism_report(&records, vocab, ctx, &bins, cfg.resamples, cfg.seed)?;
    fs::write(out.join("mechanism.json"), serde_json::to_vec_pretty(&report)?)?;
    write_manifest(out, "analyze", &cfg, &["records.jsonl.gz", "mechanism.json"])?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(a) => train(a, false),
        Command::Distill(a) => train(a, true),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Analyze(a) => analyze(a),
        Command::Report(a) => report(a),
    }
}
