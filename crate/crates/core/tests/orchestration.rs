use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use kdlab::evaluation::EvalReport;
use kdlab::model::ModelConfig;
use kdlab::orchestration::{
    emit_tables, run_sweep, CellFilter, CellState, CorpusConfig, CorpusSource, EvalSettings, ModelSpec, NamedSource,
    OptimizerSettings, SweepConfig, SweepOptions, SweepResult, CHECKPOINT_FILE, REPORT_FILE,
};
use kdlab::synthetic::Style;
use kdlab::training::TeacherLogits;

const CTX: usize = 32;
const BATCH: usize = 4;

fn spec(label: &str, steps: u64) -> ModelSpec {
    ModelSpec {
        label: label.into(),
        model: ModelConfig {
            context_len: CTX,
            ..ModelConfig::tiny()
        },
        token_budget: steps * (BATCH * CTX) as u64,
    }
}

fn config(dir: &Path) -> SweepConfig {
    SweepConfig {
        student: spec("student", 8),
        teachers: vec![spec("t-a", 12), spec("t-b", 6)],
        alphas: vec![0.5, 1.0],
        temperature: 1.0,
        data_seed: 3,
        init_seed: 4,
        teacher_seed_offset: 1000,
        corpus: CorpusConfig {
            train: CorpusSource::Synthetic {
                style: Style::Prose,
                bytes: 12_000,
                seed: 1,
            },
            held_out_fraction: 0.1,
            ood: vec![NamedSource {
                name: "dialogue".into(),
                source: CorpusSource::Synthetic {
                    style: Style::Dialogue,
                    bytes: 800,
                    seed: 2,
                },
            }],
        },
        output_dir: dir.to_path_buf(),
        eval: EvalSettings {
            mc_items: 6,
            mc_prompt_len: 8,
            mc_seed: 5,
            eval_every_steps: None,
        },
        optimizer: OptimizerSettings {
            batch_size: BATCH,
            peak_lr: 3e-3,
            ..OptimizerSettings::default()
        },
        teacher_logits: TeacherLogits::OnTheFly,
    }
}

fn ckpt_bytes(dir: &Path, cell: &str) -> Vec<u8> {
    fs::read(dir.join("cells").join(cell).join(CHECKPOINT_FILE)).unwrap()
}

fn table(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join("tables").join(name)).unwrap()
}

#[test]
fn two_by_two_grid_trains_each_cell_once_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    let opts = SweepOptions::default();

    let first = run_sweep(&cfg, &opts).unwrap();
    assert_eq!(first.executed.len(), 2 + 1 + 2 * 2);
    assert_eq!(first.executed.iter().filter(|id| id.as_str() == "baseline").count(), 1);
    for c in &first.cells {
        assert!(c.completed(), "{:?}", c.status);
    }
    emit_tables(&first).unwrap();
    let improvements = table(tmp.path(), "improvements.csv");
    let distill_a = ckpt_bytes(tmp.path(), "distill__t-a__a0.5");

    let second = run_sweep(&cfg, &opts).unwrap();
    assert!(second.executed.is_empty(), "{:?}", second.executed);

    fs::remove_file(tmp.path().join("cells/distill__t-a__a0.5").join(CHECKPOINT_FILE)).unwrap();
    let third = run_sweep(&cfg, &opts).unwrap();
    assert_eq!(third.executed, vec!["distill__t-a__a0.5".to_string()]);
    assert_eq!(ckpt_bytes(tmp.path(), "distill__t-a__a0.5"), distill_a);

    emit_tables(&third).unwrap();
    assert_eq!(table(tmp.path(), "improvements.csv"), improvements);

    // tables rebuilt from nothing but the stored reports are identical
    let reloaded = SweepResult::load(tmp.path()).unwrap();
    fs::remove_dir_all(tmp.path().join("tables")).unwrap();
    emit_tables(&reloaded).unwrap();
    assert_eq!(table(tmp.path(), "improvements.csv"), improvements);

    // every benchmark row recomputed by hand from the report files
    let report = |id: &str| EvalReport::load(&tmp.path().join("cells").join(id).join(REPORT_FILE)).unwrap();
    let base = report("baseline");
    let mut checked = 0;
    for line in improvements.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (teacher, alpha, metric, pct) = (f[0], f[2], f[3], f[4].parse::<f64>().unwrap());
        let variant = report(&format!("distill__{teacher}__a{alpha}"));
        let expected = if let Some(pool) = metric.strip_prefix("ppl:") {
            let b = base.perplexities[pool];
            100.0 * (b - variant.perplexities[pool]) / b
        } else if let Some(task) = metric.strip_prefix("acc:") {
            let b = base.accuracies[task];
            if b == 0.0 {
                continue;
            }
            100.0 * (variant.accuracies[task] - b) / b
        } else {
            continue;
        };
        assert!((pct - expected).abs() <= 1e-9 * expected.abs().max(1.0), "{line}: {expected}");
        checked += 1;
    }
    assert!(checked >= 4 * 2, "{checked}");

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["cells"].as_object().unwrap().len(), 7);
    for name in ["best_alpha.csv", "heatmap.csv", "trend.csv", "pure_kd.csv", "joint_alpha.csv", "status.csv"] {
        assert!(tmp.path().join("tables").join(name).is_file(), "{name}");
    }

    // best α rows agree with a direct argmax over the improvement rows
    let mut dims: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for line in improvements.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if ["in_domain", "ood", "mc"].contains(&f[3]) {
            dims.entry((f[0].into(), f[3].into()))
                .or_default()
                .push((f[2].parse().unwrap(), f[4].parse().unwrap()));
        }
    }
    let best = table(tmp.path(), "best_alpha.csv");
    for line in best.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let mut cells = dims[&(f[0].to_string(), f[3].to_string())].clone();
        cells.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut winner = cells[0];
        for &c in &cells[1..] {
            if c.1 > winner.1 {
                winner = c;
            }
        }
        assert_eq!(f[4].parse::<f64>().unwrap(), winner.0, "{line}");
    }

    // each heatmap group holds exactly one 100 and one 0 when its values differ
    let heat = table(tmp.path(), "heatmap.csv");
    let mut groups: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for line in heat.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        groups
            .entry((f[0].into(), f[2].into()))
            .or_default()
            .push((f[4].parse().unwrap(), f[5].parse().unwrap()));
    }
    for (key, values) in &groups {
        assert_eq!(values.len(), 2);
        if values[0].0 != values[1].0 {
            assert_eq!(values.iter().filter(|v| v.1 == 100.0).count(), 1, "{key:?}");
            assert_eq!(values.iter().filter(|v| v.1 == 0.0).count(), 1, "{key:?}");
        }
    }

    // pure-distillation column minus the best column
    let pure = table(tmp.path(), "pure_kd.csv");
    for line in pure.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (a1, best, diff): (f64, f64, f64) = (f[3].parse().unwrap(), f[5].parse().unwrap(), f[6].parse().unwrap());
        assert_eq!(diff, a1 - best, "{line}");
        assert!(diff <= 0.0);
    }
}

#[test]
fn cell_selector_runs_only_prerequisites_and_failures_do_not_stop_the_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    let opts = SweepOptions {
        filter: CellFilter::parse("t-b:1").unwrap(),
        ..SweepOptions::default()
    };
    let result = run_sweep(&cfg, &opts).unwrap();
    assert_eq!(result.executed, vec!["teacher__t-b", "baseline", "distill__t-b__a1"]);

    // a corrupted teacher makes its students fail without stopping the others
    fs::write(tmp.path().join("cells/teacher__t-b").join(CHECKPOINT_FILE), b"garbage").unwrap();
    fs::remove_dir_all(tmp.path().join("cells/distill__t-b__a1")).unwrap();
    let all = run_sweep(&cfg, &SweepOptions::default()).unwrap();
    assert_eq!(all.executed.len(), 1 + 4);
    let state = |id: &str| all.cell(id).unwrap().status.as_ref().unwrap().state;
    assert_eq!(state("distill__t-b__a0.5"), CellState::Failed);
    assert_eq!(state("distill__t-b__a1"), CellState::Failed);
    assert_eq!(state("distill__t-a__a0.5"), CellState::Completed);
    assert_eq!(state("distill__t-a__a1"), CellState::Completed);

    emit_tables(&all).unwrap();
    let status = table(tmp.path(), "status.csv");
    assert!(status.contains("distill__t-b__a1,distill,failed,"));
    let best = table(tmp.path(), "best_alpha.csv");
    assert!(best.lines().any(|l| l.starts_with("t-b,") && l.ends_with("incomplete grid")));
    assert!(best.lines().any(|l| l.starts_with("t-a,") && !l.ends_with("incomplete grid")));

    // failed cells stay failed unless a retry is asked for
    let again = run_sweep(&cfg, &SweepOptions::default()).unwrap();
    assert!(again.executed.is_empty());
    let retry = run_sweep(
        &cfg,
        &SweepOptions {
            retry_failed: true,
            ..SweepOptions::default()
        },
    )
    .unwrap();
    assert_eq!(retry.executed, vec!["distill__t-b__a0.5", "distill__t-b__a1"]);
}

#[test]
fn parallel_workers_match_serial_results_and_eval_cadence_writes_curves() {
    let serial = tempfile::tempdir().unwrap();
    let parallel = tempfile::tempdir().unwrap();
    let mut cfg = config(serial.path());
    cfg.teachers.truncate(1);
    cfg.alphas = vec![1.0];
    cfg.eval.eval_every_steps = Some(3);
    run_sweep(&cfg, &SweepOptions::default()).unwrap();
    let mut pcfg = cfg.clone();
    pcfg.output_dir = parallel.path().to_path_buf();
    run_sweep(
        &pcfg,
        &SweepOptions {
            workers: 3,
            ..SweepOptions::default()
        },
    )
    .unwrap();
    for cell in ["teacher__t-a", "baseline", "distill__t-a__a1"] {
        assert_eq!(ckpt_bytes(serial.path(), cell), ckpt_bytes(parallel.path(), cell), "{cell}");
        let curve = fs::read_to_string(serial.path().join("cells").join(cell).join("eval_curve.csv")).unwrap();
        assert!(curve.starts_with("step,held_out_ppl\n3,"), "{curve}");
    }
}

#[test]
fn cached_teacher_logits_reproduce_live_distillation() {
    let live = tempfile::tempdir().unwrap();
    let cached = tempfile::tempdir().unwrap();
    let mut cfg = config(live.path());
    cfg.teachers.truncate(1);
    cfg.alphas = vec![0.5];
    run_sweep(&cfg, &SweepOptions::default()).unwrap();
    let mut ccfg = cfg.clone();
    ccfg.output_dir = cached.path().to_path_buf();
    ccfg.teacher_logits = TeacherLogits::Cached { top_k: None };
    run_sweep(&ccfg, &SweepOptions::default()).unwrap();
    assert_eq!(
        ckpt_bytes(live.path(), "distill__t-a__a0.5"),
        ckpt_bytes(cached.path(), "distill__t-a__a0.5")
    );
}

#[test]
fn invalid_configs_are_rejected_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.teachers[0].model.context_len = CTX / 2;
    assert!(run_sweep(&cfg, &SweepOptions::default()).is_err());
    let mut cfg = config(tmp.path());
    cfg.alphas.push(1.5);
    assert!(run_sweep(&cfg, &SweepOptions::default()).is_err());
    let mut cfg = config(tmp.path());
    cfg.corpus.train = CorpusSource::File {
        path: tmp.path().join("missing.txt"),
    };
    assert!(run_sweep(&cfg, &SweepOptions::default()).is_err());
    assert!(!tmp.path().join("cells").exists());
}
