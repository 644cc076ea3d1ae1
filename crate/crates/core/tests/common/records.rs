//! Synthetic token records and brute-force recomputations of the
//! mechanism aggregates.

use kdlab::mechanism::TokenRecord;

use super::XorShift;

pub const VOCAB: usize = 256;
pub const K: usize = 10;

fn distinct_ids(rng: &mut XorShift, include: Option<u32>) -> Vec<u32> {
    let mut ids = Vec::with_capacity(K);
    if let Some(gt) = include {
        ids.push(gt);
    }
    while ids.len() < K {
        let id = rng.below(VOCAB) as u32;
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    // put the forced id somewhere other than the front now and then
    let j = rng.below(K);
    ids.swap(0, j);
    ids
}

/// Records with entropies spread over `[0, ln V]`, positions over
/// `[0, context)`, and ground truth appearing in each list about half the
/// time. `student_shift(h, position, rng)` is added to the baseline NLL.
pub fn synthetic(
    n: usize,
    seed: u64,
    context: usize,
    mut student_shift: impl FnMut(f64, usize, &mut XorShift) -> f64,
) -> Vec<TokenRecord> {
    let mut rng = XorShift::new(seed);
    let ln_v = (VOCAB as f64).ln();
    (0..n)
        .map(|_| {
            let h_base = (rng.unit() * 0.5 + 0.5) * ln_v;
            let position = rng.below(context);
            let gt = rng.below(VOCAB) as u32;
            let nll_base = 0.2 + 3.0 * (rng.unit() * 0.5 + 0.5) + 0.3 * h_base;
            let shift = student_shift(h_base, position, &mut rng);
            let in_base = rng.below(2) == 0;
            let in_teacher = rng.below(2) == 0;
            let topk_base = distinct_ids(&mut rng, in_base.then_some(gt));
            let topk_teacher = distinct_ids(&mut rng, in_teacher.then_some(gt));
            let mut topk_student = if rng.below(2) == 0 { topk_teacher.clone() } else { topk_base.clone() };
            let swap = rng.below(K);
            let fresh = distinct_ids(&mut rng, None)
                .into_iter()
                .find(|id| !topk_student.contains(id))
                .unwrap();
            topk_student[swap] = fresh;
            TokenRecord {
                corpus_tag: "synthetic".into(),
                position: position as u32,
                gt_id: gt,
                h_base,
                h_student: (h_base - 0.1 * rng.unit().abs()).max(0.0),
                nll_base,
                nll_student: (nll_base + shift).max(0.0),
                nll_teacher: (nll_base - 0.2 * rng.unit().abs()).max(0.0),
                topk_base,
                topk_student,
                topk_teacher,
            }
        })
        .collect()
}

/// Perplexity improvement of a group computed the long way: filter first,
/// then average in a second pass.
pub fn naive_group_pct(records: &[&TokenRecord]) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    let n = records.len() as f64;
    let mut base = 0.0;
    let mut student = 0.0;
    for r in records {
        base += r.nll_base;
    }
    for r in records {
        student += r.nll_student;
    }
    let pb = (base / n).exp();
    let ps = (student / n).exp();
    Some(100.0 * (pb - ps) / pb)
}

pub fn naive_overlap(a: &[u32], b: &[u32]) -> usize {
    let mut count = 0;
    for x in a {
        for y in b {
            if x == y {
                count += 1;
            }
        }
    }
    count
}
