//! Softmax-family helpers and compensated summation.

use crate::scalar::Scalar;

/// Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Self::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Mean with compensated summation; `NaN` for an empty input.
pub fn compensated_mean<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = CompensatedSum::new();
    let mut n = 0usize;
    for v in values {
        acc.add(v);
        n += 1;
    }
    acc.value() / n as f64
}

pub fn max_of<S: Scalar>(row: &[S]) -> S {
    row.iter().fold(S::neg_infinity(), |m, &x| if x > m { x } else { m })
}

/// `log Σ exp(row)`, shifted by the row maximum.
pub fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let m = max_of(row);
    if !m.is_finite() {
        return m;
    }
    let s: S = row.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Writes `softmax(row / temperature)` into `out`.
pub fn softmax_into<S: Scalar>(row: &[S], temperature: S, out: &mut [S]) {
    debug_assert_eq!(row.len(), out.len());
    let m = max_of(row);
    let mut total = S::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = ((x - m) / temperature).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax<S: Scalar>(row: &[S]) -> Vec<S> {
    let mut out = vec![S::zero(); row.len()];
    softmax_into(row, S::one(), &mut out);
    out
}

/// Writes `log softmax(row / temperature)` into `out`.
pub fn log_softmax_into<S: Scalar>(row: &[S], temperature: S, out: &mut [S]) {
    debug_assert_eq!(row.len(), out.len());
    let m = max_of(row);
    let mut total = S::zero();
    for &x in row {
        total += ((x - m) / temperature).exp();
    }
    let lse = total.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - m) / temperature - lse;
    }
}

/// Shannon entropy (nats) of `softmax(row)`, computed in `f64`.
pub fn entropy_of_logits<S: Scalar>(row: &[S]) -> f64 {
    let row: Vec<f64> = row.iter().map(|x| x.to_f64_lossy()).collect();
    let lse = log_sum_exp(&row);
    let mut h = CompensatedSum::new();
    for &x in &row {
        let lp = x - lse;
        let p = lp.exp();
        if p > 0.0 {
            h.add(-p * lp);
        }
    }
    h.value().max(0.0)
}

/// Indices of the `k` largest entries, descending, ties to the lower index.
pub fn top_k_indices<S: Scalar>(row: &[S], k: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..row.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        row[b as usize]
            .partial_cmp(&row[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k.min(row.len()));
    idx
}
