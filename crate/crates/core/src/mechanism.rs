//! Per-token analysis of where distillation helps.
//!
//! [`collect_records`] runs a baseline, a student and a teacher over the
//! same evaluation windows and keeps, per position, the baseline entropy,
//! each model's NLL and top-k ids. Every analysis below is a pure fold over
//! those records. Per-group perplexity is `exp(mean NLL in group)`, and
//! improvements use the same sign convention as evaluation (positive means
//! the variant is better than the baseline).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenPool;
use crate::error::{Error, Result};
use crate::evaluation::{eval_windows, pct_improvement, MetricKind};
use crate::model::LanguageModel;
use crate::numerics::{entropy_of_logits, log_sum_exp, top_k_indices, CompensatedSum};
use crate::scalar::Scalar;

pub const RECORD_FORMAT: &str = "DFREC1";
pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_RECORD_CAP: usize = 50_000;

/// One evaluated token position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub corpus_tag: String,
    pub position: u32,
    pub gt_id: u32,
    pub h_base: f64,
    pub h_student: f64,
    pub nll_base: f64,
    pub nll_student: f64,
    pub nll_teacher: f64,
    pub topk_base: Vec<u32>,
    pub topk_student: Vec<u32>,
    pub topk_teacher: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Baseline,
    Student,
    Teacher,
}

impl TokenRecord {
    pub fn nll(&self, role: ModelRole) -> f64 {
        match role {
            ModelRole::Baseline => self.nll_base,
            ModelRole::Student => self.nll_student,
            ModelRole::Teacher => self.nll_teacher,
        }
    }

    pub fn validate(&self, vocab_size: usize, k: usize) -> Result<()> {
        let ln_v = (vocab_size as f64).ln();
        for h in [self.h_base, self.h_student] {
            if !(0.0..=ln_v + 1e-9).contains(&h) {
                return Err(Error::EntropyOutOfRange { entropy: h, vocab_size });
            }
        }
        for nll in [self.nll_base, self.nll_student, self.nll_teacher] {
            if !(nll >= 0.0) {
                return Err(Error::InvalidArgument(format!("negative or NaN NLL {nll}")));
            }
        }
        for list in [&self.topk_base, &self.topk_student, &self.topk_teacher] {
            let mut sorted = list.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if list.len() != k || sorted.len() != k || list.iter().any(|&i| i as usize >= vocab_size) {
                return Err(Error::InvalidArgument(format!("top-k list {list:?} is not {k} distinct ids")));
            }
        }
        Ok(())
    }
}

/// Runs the three models over the pool's evaluation windows and returns at
/// most `cap` records in window-then-position order.
pub fn collect_records<S: Scalar>(
    baseline: &dyn LanguageModel<S>,
    student: &dyn LanguageModel<S>,
    teacher: &dyn LanguageModel<S>,
    pool: &TokenPool,
    context_len: usize,
    k: usize,
    cap: usize,
) -> Result<Vec<TokenRecord>> {
    let vocab = baseline.vocab_size();
    if student.vocab_size() != vocab || teacher.vocab_size() != vocab || pool.vocab_size() != vocab {
        return Err(Error::VocabMismatch(format!(
            "baseline {vocab}, student {}, teacher {}, pool {}",
            student.vocab_size(),
            teacher.vocab_size(),
            pool.vocab_size()
        )));
    }
    if cap == 0 || k == 0 || k > vocab {
        return Err(Error::InvalidArgument(format!("cap {cap} and k {k} must be in 1..=vocab")));
    }
    for m in [baseline, student, teacher] {
        if context_len > m.context_len() {
            return Err(Error::ContextOverflow {
                len: context_len,
                max: m.context_len(),
            });
        }
    }
    let windows: Vec<&[u32]> = eval_windows(pool, context_len).collect();
    if windows.is_empty() {
        return Err(Error::CorpusTooSmall {
            what: format!("records from `{}`", pool.pool_id()),
            needed: context_len + 1,
            available: pool.len(),
        });
    }
    let ln_v = (vocab as f64).ln();
    let mut records = Vec::with_capacity(cap.min(windows.len() * context_len));
    'outer: for chunk in windows.chunks(8) {
        let inputs: Vec<u32> = chunk.iter().flat_map(|w| w[..context_len].iter().copied()).collect();
        let lb = baseline.logits(&inputs, chunk.len(), context_len)?;
        let ls = student.logits(&inputs, chunk.len(), context_len)?;
        let lt = teacher.logits(&inputs, chunk.len(), context_len)?;
        for (b, w) in chunk.iter().enumerate() {
            for pos in 0..context_len {
                if records.len() == cap {
                    break 'outer;
                }
                let at = (b * context_len + pos) * vocab;
                let rows = [&lb[at..at + vocab], &ls[at..at + vocab], &lt[at..at + vocab]];
                let gt = w[pos + 1];
                let nll = |row: &[S]| (log_sum_exp(row) - row[gt as usize]).to_f64_lossy().max(0.0);
                records.push(TokenRecord {
                    corpus_tag: pool.pool_id().to_string(),
                    position: pos as u32,
                    gt_id: gt,
                    h_base: entropy_of_logits(rows[0]).min(ln_v),
                    h_student: entropy_of_logits(rows[1]).min(ln_v),
                    nll_base: nll(rows[0]),
                    nll_student: nll(rows[1]),
                    nll_teacher: nll(rows[2]),
                    topk_base: top_k_indices(rows[0], k),
                    topk_student: top_k_indices(rows[1], k),
                    topk_teacher: top_k_indices(rows[2], k),
                });
            }
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub format: String,
    pub vocab_size: usize,
    pub k: usize,
    pub context_len: usize,
    /// Labels of the baseline, student and teacher models.
    pub models: BTreeMap<ModelRole, String>,
}

impl RecordHeader {
    pub fn new(vocab_size: usize, k: usize, context_len: usize, baseline: &str, student: &str, teacher: &str) -> Self {
        let models = [
            (ModelRole::Baseline, baseline.to_string()),
            (ModelRole::Student, student.to_string()),
            (ModelRole::Teacher, teacher.to_string()),
        ]
        .into_iter()
        .collect();
        Self {
            format: RECORD_FORMAT.to_string(),
            vocab_size,
            k,
            context_len,
            models,
        }
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn write_lines<W: Write>(out: &mut W, path: &Path, header: &RecordHeader, records: &[TokenRecord]) -> Result<()> {
    serde_json::to_writer(&mut *out, header)?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Header line then one JSON record per line; gzip when the path ends in `.gz`.
pub fn write_records(path: &Path, header: &RecordHeader, records: &[TokenRecord]) -> Result<()> {
    let file = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let mut file = if is_gz(path) {
        let mut enc = GzEncoder::new(file, Compression::default());
        write_lines(&mut enc, path, header, records)?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        let mut file = file;
        write_lines(&mut file, path, header, records)?;
        file
    };
    file.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<(RecordHeader, Vec<TokenRecord>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let input: Box<dyn Read> = if is_gz(path) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let mut lines = BufReader::new(input).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Truncated("record file has no header".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: RecordHeader = serde_json::from_str(&first)?;
    if header.format != RECORD_FORMAT {
        return Err(Error::VersionMismatch {
            expected: RECORD_FORMAT.into(),
            found: header.format,
        });
    }
    let mut records = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let r: TokenRecord = serde_json::from_str(&line)?;
        r.validate(header.vocab_size, header.k)?;
        records.push(r);
    }
    Ok((header, records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    Difficult,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard, Difficulty::Difficult];

    pub fn label(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
            Difficulty::Difficult => "difficult",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyUnit {
    #[default]
    Nats,
    Bits,
}

/// Three ascending entropy edges splitting easy | moderate | hard | difficult;
/// each upper bin is closed on the left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyBins {
    pub edges: [f64; 3],
    #[serde(default)]
    pub unit: EntropyUnit,
}

impl Default for DifficultyBins {
    fn default() -> Self {
        Self::paper()
    }
}

impl DifficultyBins {
    /// Edges 2, 5 and 8 nats.
    pub fn paper() -> Self {
        Self {
            edges: [2.0, 5.0, 8.0],
            unit: EntropyUnit::Nats,
        }
    }

    /// The paper's edges rescaled to a small vocabulary: 0.25, 0.625 and
    /// 1.0 times `ln V`.
    pub fn desk(vocab_size: usize) -> Self {
        let ln_v = (vocab_size as f64).ln();
        Self {
            edges: [0.25 * ln_v, 0.625 * ln_v, ln_v],
            unit: EntropyUnit::Nats,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.edges;
        if !(a > 0.0 && a < b && b < c && c.is_finite()) {
            return Err(Error::InvalidConfig(format!("entropy edges {:?} must be positive and ascending", self.edges)));
        }
        Ok(())
    }

    /// Bin of an entropy given in nats.
    pub fn classify(&self, h_nats: f64) -> Result<Difficulty> {
        if !(h_nats >= 0.0) {
            return Err(Error::NegativeEntropy(h_nats));
        }
        let h = match self.unit {
            EntropyUnit::Nats => h_nats,
            EntropyUnit::Bits => h_nats / std::f64::consts::LN_2,
        };
        let [a, b, c] = self.edges;
        Ok(if h < a {
            Difficulty::Easy
        } else if h < b {
            Difficulty::Moderate
        } else if h < c {
            Difficulty::Hard
        } else {
            Difficulty::Difficult
        })
    }
}

/// Bin of `h` under the default edges (2, 5, 8 nats).
pub fn difficulty_bin(h: f64) -> Result<Difficulty> {
    DifficultyBins::paper().classify(h)
}

/// NLL totals for one group of records.
#[derive(Debug, Clone, Default)]
struct GroupSums {
    count: usize,
    base: CompensatedSum,
    variant: CompensatedSum,
}

impl GroupSums {
    fn add(&mut self, base: f64, variant: f64) {
        self.count += 1;
        self.base.add(base);
        self.variant.add(variant);
    }

    fn stat(&self, label: String) -> Result<BinStat> {
        if self.count == 0 {
            return Ok(BinStat {
                label,
                count: 0,
                mean_nll_base: None,
                mean_nll_variant: None,
                pct: None,
            });
        }
        let mb = self.base.value() / self.count as f64;
        let mv = self.variant.value() / self.count as f64;
        Ok(BinStat {
            label,
            count: self.count,
            mean_nll_base: Some(mb),
            mean_nll_variant: Some(mv),
            pct: Some(pct_improvement(mb.exp(), mv.exp(), MetricKind::Ppl)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub label: String,
    pub count: usize,
    pub mean_nll_base: Option<f64>,
    pub mean_nll_variant: Option<f64>,
    /// Perplexity improvement of the variant; `None` for an empty bin.
    pub pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub bins: Vec<BinStat>,
}

impl BinReport {
    pub fn get(&self, label: &str) -> Option<&BinStat> {
        self.bins.iter().find(|b| b.label == label)
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

fn require_records(records: &[TokenRecord]) -> Result<()> {
    if records.is_empty() {
        Err(Error::Empty("records"))
    } else {
        Ok(())
    }
}

/// Per-difficulty perplexity improvement of `variant` over `base`.
pub fn bin_improvements(records: &[TokenRecord], bins: &DifficultyBins, base: ModelRole, variant: ModelRole) -> Result<BinReport> {
    require_records(records)?;
    bins.validate()?;
    let mut sums: [GroupSums; 4] = Default::default();
    for r in records {
        let d = bins.classify(r.h_base)?;
        sums[d as usize].add(r.nll(base), r.nll(variant));
    }
    let bins = Difficulty::ALL
        .iter()
        .zip(&sums)
        .map(|(d, s)| s.stat(d.label().to_string()))
        .collect::<Result<_>>()?;
    Ok(BinReport { bins })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Both,
    TeacherOnly,
    BaselineOnly,
    Neither,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Both, Category::TeacherOnly, Category::BaselineOnly, Category::Neither];

    pub fn label(self) -> &'static str {
        match self {
            Category::Both => "both",
            Category::TeacherOnly => "teacher_only",
            Category::BaselineOnly => "baseline_only",
            Category::Neither => "neither",
        }
    }
}

/// Which of the two top-k lists contain the ground-truth token.
pub fn categorize_token(gt_id: u32, topk_base: &[u32], topk_teacher: &[u32]) -> Category {
    match (topk_base.contains(&gt_id), topk_teacher.contains(&gt_id)) {
        (true, true) => Category::Both,
        (false, true) => Category::TeacherOnly,
        (true, false) => Category::BaselineOnly,
        (false, false) => Category::Neither,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStat {
    pub fraction: f64,
    pub stat: BinStat,
}

/// Share of records and student improvement for each category.
pub fn category_improvements(records: &[TokenRecord]) -> Result<BTreeMap<Category, CategoryStat>> {
    require_records(records)?;
    let mut sums: [GroupSums; 4] = Default::default();
    for r in records {
        let c = categorize_token(r.gt_id, &r.topk_base, &r.topk_teacher);
        sums[c as usize].add(r.nll_base, r.nll_student);
    }
    let n = records.len() as f64;
    Category::ALL
        .iter()
        .zip(&sums)
        .map(|(&c, s)| {
            Ok((
                c,
                CategoryStat {
                    fraction: s.count as f64 / n,
                    stat: s.stat(c.label().to_string())?,
                },
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Concentration {
    /// Student improvement on hard tokens minus that on easy tokens.
    pub statistic: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `2·min(P(≤0), P(≥0))` clamped to `[1/resamples, 1]`.
    pub p_value: f64,
    /// The same before clamping; 0 when no resample fell on the far side of 0.
    pub p_raw: f64,
    pub resamples: usize,
    /// Resamples without a hard or an easy record; excluded from the CI.
    pub skipped: usize,
}

fn hard_minus_easy(hard: &GroupSums, easy: &GroupSums) -> Option<f64> {
    if hard.count == 0 || easy.count == 0 {
        return None;
    }
    let pct = |g: &GroupSums| {
        let mb = g.base.value() / g.count as f64;
        let mv = g.variant.value() / g.count as f64;
        100.0 * (mb.exp() - mv.exp()) / mb.exp()
    };
    Some(pct(hard) - pct(easy))
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Bootstrap of the hard-minus-easy improvement gap with a 95 % percentile
/// interval and a two-sided sign p-value, `2·min(P(≤0), P(≥0))` clamped to
/// `[1/resamples, 1]`.
pub fn concentration_bootstrap(records: &[TokenRecord], bins: &DifficultyBins, resamples: usize, seed: u64) -> Result<Concentration> {
    require_records(records)?;
    bins.validate()?;
    if resamples == 0 {
        return Err(Error::InvalidArgument("resamples must be positive".into()));
    }
    let classes: Vec<Difficulty> = records.iter().map(|r| bins.classify(r.h_base)).collect::<Result<_>>()?;
    let gather = |picks: &mut dyn Iterator<Item = usize>| {
        let mut hard = GroupSums::default();
        let mut easy = GroupSums::default();
        for i in picks {
            let r = &records[i];
            match classes[i] {
                Difficulty::Hard => hard.add(r.nll_base, r.nll_student),
                Difficulty::Easy => easy.add(r.nll_base, r.nll_student),
                _ => {}
            }
        }
        hard_minus_easy(&hard, &easy)
    };
    let statistic = gather(&mut (0..records.len())).ok_or_else(|| {
        Error::EmptyBin(if classes.contains(&Difficulty::Hard) { "easy" } else { "hard" }.to_string())
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = records.len();
    let mut stats = Vec::with_capacity(resamples);
    let mut skipped = 0;
    for _ in 0..resamples {
        let mut picks = (0..n).map(|_| rng.random_range(0..n));
        match gather(&mut picks) {
            Some(s) => stats.push(s),
            None => skipped += 1,
        }
    }
    if stats.is_empty() {
        return Err(Error::EmptyBin("hard or easy in every resample".into()));
    }
    stats.sort_by(f64::total_cmp);
    let m = stats.len() as f64;
    let le = stats.iter().filter(|&&s| s <= 0.0).count() as f64 / m;
    let ge = stats.iter().filter(|&&s| s >= 0.0).count() as f64 / m;
    let p_raw = (2.0 * le.min(ge)).min(1.0);
    let p_value = p_raw.max(1.0 / resamples as f64);
    Ok(Concentration {
        statistic,
        ci_low: quantile(&stats, 0.025),
        ci_high: quantile(&stats, 0.975),
        p_value,
        p_raw,
        resamples,
        skipped,
    })
}

/// `ln V − H`: the per-token benefit profile of uniform label smoothing.
pub fn ls_benefit(h: f64, vocab_size: usize) -> Result<f64> {
    let ln_v = (vocab_size as f64).ln();
    if !(0.0..=ln_v).contains(&h) {
        return Err(Error::EntropyOutOfRange { entropy: h, vocab_size });
    }
    Ok(ln_v - h)
}

/// Number of times `a − b` changes sign along two profiles sampled at the
/// same points; zero differences do not count as a side.
pub fn count_crossings(a: &[f64], b: &[f64]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("profiles of length {} and {}", a.len(), b.len())));
    }
    let mut last = 0.0f64;
    let mut crossings = 0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        if d != 0.0 {
            if last != 0.0 && d.signum() != last.signum() {
                crossings += 1;
            }
            last = d;
        }
    }
    Ok(crossings)
}

fn overlap(a: &[u32], b: &[u32]) -> usize {
    a.iter().filter(|x| b.contains(x)).count()
}

/// Mean student–teacher top-k overlap over mean student–baseline overlap;
/// above 1 means the student sits closer to the teacher.
pub fn convergence_ratio(records: &[TokenRecord]) -> Result<f64> {
    require_records(records)?;
    let mut num = CompensatedSum::new();
    let mut den = CompensatedSum::new();
    for r in records {
        let k = r.topk_student.len() as f64;
        num.add(overlap(&r.topk_student, &r.topk_teacher) as f64 / k);
        den.add(overlap(&r.topk_student, &r.topk_base) as f64 / k);
    }
    let n = records.len() as f64;
    let den = den.value() / n;
    if den == 0.0 {
        return Err(Error::ZeroDenominator(
            "student and baseline top-k lists never overlap".into(),
        ));
    }
    Ok((num.value() / n) / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyPoint {
    pub label: String,
    /// Mean of `h_student − h_base`, nats.
    pub entropy_delta: f64,
    /// Whole-record perplexity improvement of the student.
    pub pct: f64,
}

/// One point per student: mean entropy change against overall improvement.
pub fn entropy_delta_points(students: &[(&str, &[TokenRecord])]) -> Result<Vec<EntropyPoint>> {
    students
        .iter()
        .map(|&(label, records)| {
            require_records(records)?;
            let mut sums = GroupSums::default();
            let mut delta = CompensatedSum::new();
            for r in records {
                sums.add(r.nll_base, r.nll_student);
                delta.add(r.h_student - r.h_base);
            }
            let stat = sums.stat(label.to_string())?;
            Ok(EntropyPoint {
                label: label.to_string(),
                entropy_delta: delta.value() / records.len() as f64,
                pct: stat.pct.expect("nonempty"),
            })
        })
        .collect()
}

/// Position bin edges scaled from the paper's 0/128/512/1024/2048 split.
pub fn desk_position_edges(context_len: usize) -> Vec<usize> {
    [0, 1, 2, 4, 8].iter().map(|&m| m * context_len / 8).collect()
}

/// Student improvement per position bin `[edges[i], edges[i+1])`.
pub fn position_improvements(records: &[TokenRecord], edges: &[usize], context_len: usize) -> Result<BinReport> {
    require_records(records)?;
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) || edges[edges.len() - 1] > context_len {
        return Err(Error::InvalidArgument(format!(
            "position edges {edges:?} must ascend strictly and end within {context_len}"
        )));
    }
    let mut sums: Vec<GroupSums> = vec![GroupSums::default(); edges.len() - 1];
    for r in records {
        let p = r.position as usize;
        if let Some(i) = edges.windows(2).position(|w| w[0] <= p && p < w[1]) {
            sums[i].add(r.nll_base, r.nll_student);
        }
    }
    let bins = sums
        .iter()
        .zip(edges.windows(2))
        .map(|(s, w)| s.stat(format!("{}-{}", w[0], w[1])))
        .collect::<Result<_>>()?;
    Ok(BinReport { bins })
}

/// Label-smoothing benefit and measured student improvement per difficulty
/// bin, both min-max normalized before counting crossings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsProfile {
    pub labels: Vec<String>,
    /// Mean `ln V − H` of the bin's records.
    pub ls_benefit: Vec<f64>,
    pub distill_pct: Vec<f64>,
    pub crossings: usize,
}

/// Every aggregate of the analysis suite over one record set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismReport {
    pub records: usize,
    pub vocab_size: usize,
    pub bins: DifficultyBins,
    pub student_bins: BinReport,
    pub teacher_bins: BinReport,
    pub categories: BTreeMap<Category, CategoryStat>,
    /// `None` when the records lack a hard or an easy token.
    pub concentration: Option<Concentration>,
    /// `None` when student and baseline top-k lists never overlap.
    pub convergence_ratio: Option<f64>,
    pub positions: BinReport,
    pub entropy: EntropyPoint,
    /// `None` with fewer than two non-empty difficulty bins.
    pub ls_profile: Option<LsProfile>,
}

pub fn mechanism_report(
    records: &[TokenRecord],
    vocab_size: usize,
    context_len: usize,
    bins: &DifficultyBins,
    resamples: usize,
    seed: u64,
) -> Result<MechanismReport> {
    require_records(records)?;
    let student_bins = bin_improvements(records, bins, ModelRole::Baseline, ModelRole::Student)?;
    let teacher_bins = bin_improvements(records, bins, ModelRole::Baseline, ModelRole::Teacher)?;
    let concentration = match concentration_bootstrap(records, bins, resamples, seed) {
        Ok(c) => Some(c),
        Err(Error::EmptyBin(_)) => None,
        Err(e) => return Err(e),
    };
    let convergence_ratio = match convergence_ratio(records) {
        Ok(r) => Some(r),
        Err(Error::ZeroDenominator(_)) => None,
        Err(e) => return Err(e),
    };
    let ln_v = (vocab_size as f64).ln();
    let mut ls_sums = vec![CompensatedSum::new(); Difficulty::ALL.len()];
    for r in records {
        // entropies computed in f32 can overshoot ln V by rounding
        ls_sums[bins.classify(r.h_base)? as usize].add(ls_benefit(r.h_base.min(ln_v), vocab_size)?);
    }
    let mut labels = Vec::new();
    let mut ls = Vec::new();
    let mut kd = Vec::new();
    for (stat, sum) in student_bins.bins.iter().zip(&ls_sums) {
        if let Some(pct) = stat.pct {
            labels.push(stat.label.clone());
            ls.push(sum.value() / stat.count as f64);
            kd.push(pct);
        }
    }
    let ls_profile = if labels.len() >= 2 {
        let crossings = count_crossings(
            &crate::evaluation::minmax_normalize(&ls)?,
            &crate::evaluation::minmax_normalize(&kd)?,
        )?;
        Some(LsProfile {
            labels,
            ls_benefit: ls,
            distill_pct: kd,
            crossings,
        })
    } else {
        None
    };
    Ok(MechanismReport {
        records: records.len(),
        vocab_size,
        bins: *bins,
        student_bins,
        teacher_bins,
        categories: category_improvements(records)?,
        concentration,
        convergence_ratio,
        positions: position_improvements(records, &desk_position_edges(context_len), context_len)?,
        entropy: entropy_delta_points(&[("student", records)])?.remove(0),
        ls_profile,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_bin_edges() {
        assert_eq!(difficulty_bin(1.5).unwrap(), Difficulty::Easy);
        assert_eq!(difficulty_bin(2.0).unwrap(), Difficulty::Moderate);
        assert_eq!(difficulty_bin(4.999).unwrap(), Difficulty::Moderate);
        assert_eq!(difficulty_bin(5.0).unwrap(), Difficulty::Hard);
        assert_eq!(difficulty_bin(8.0).unwrap(), Difficulty::Difficult);
        assert_eq!(difficulty_bin(9.3).unwrap(), Difficulty::Difficult);
        assert!(matches!(difficulty_bin(-0.1), Err(Error::NegativeEntropy(_))));
    }

    #[test]
    fn bit_unit_and_desk_edges() {
        let bits = DifficultyBins {
            edges: [2.0, 5.0, 8.0],
            unit: EntropyUnit::Bits,
        };
        // 2 bits = 1.386 nats
        assert_eq!(bits.classify(1.3).unwrap(), Difficulty::Easy);
        assert_eq!(bits.classify(1.4).unwrap(), Difficulty::Moderate);
        let desk = DifficultyBins::desk(256);
        assert_eq!(desk.classify(5.0).unwrap(), Difficulty::Hard);
        assert_eq!(desk.classify(256f64.ln()).unwrap(), Difficulty::Difficult);
    }

    #[test]
    fn categories() {
        let base = [1, 2, 3];
        let teacher = [3, 4, 5];
        assert_eq!(categorize_token(3, &base, &teacher), Category::Both);
        assert_eq!(categorize_token(4, &base, &teacher), Category::TeacherOnly);
        assert_eq!(categorize_token(1, &base, &teacher), Category::BaselineOnly);
        assert_eq!(categorize_token(9, &base, &teacher), Category::Neither);
    }

    #[test]
    fn ls_benefit_examples() {
        let ln_v = 256f64.ln();
        assert_eq!(ls_benefit(ln_v, 256).unwrap(), 0.0);
        assert_eq!(ls_benefit(0.0, 256).unwrap(), ln_v);
        assert!((ls_benefit(2.0, 256).unwrap() - 3.545_177_444_479_562).abs() < 1e-12);
        assert!(ls_benefit(6.0, 256).is_err());
        assert!(ls_benefit(-1.0, 256).is_err());
    }

    #[test]
    fn crossings() {
        assert_eq!(count_crossings(&[3.0, 2.0, 1.0], &[0.0, 2.5, 4.0]).unwrap(), 1);
        assert_eq!(count_crossings(&[3.0, 2.0, 1.0], &[0.0, 0.5, 0.9]).unwrap(), 0);
        assert_eq!(count_crossings(&[1.0, 0.0, 1.0], &[0.0, 0.0, 2.0]).unwrap(), 1);
        assert_eq!(count_crossings(&[1.0, -1.0, 1.0], &[0.0, 0.0, 0.0]).unwrap(), 2);
    }

    #[test]
    fn desk_position_edges_scale() {
        assert_eq!(desk_position_edges(256), vec![0, 32, 64, 128, 256]);
        assert_eq!(desk_position_edges(64), vec![0, 8, 16, 32, 64]);
    }
}
