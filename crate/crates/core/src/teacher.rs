//! Precomputed teacher logits for a run's batch stream.
//!
//! A cache covers the first `steps` batches drawn from a pool under a given
//! data seed. `Full` keeps raw logits and reproduces live teacher logits
//! bit for bit. `TopK(k)` keeps the `k` largest log-probabilities per
//! position and spreads the remaining probability mass uniformly over the
//! other ids; the reconstructed log-probabilities act as logits.
//!
//! File layout: magic `DFLOGIT1`, little-endian `u64` header length, JSON
//! header, then the payload as little-endian `f32` (and `u32` ids for
//! top-k entries).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{BatchStream, TokenPool};
use crate::error::{Error, Result};
use crate::model::{forward_logits, ParameterSet};
use crate::numerics::{log_softmax_into, top_k_indices};
use crate::scalar::Scalar;
use crate::training::RunConfig;

pub const LOGIT_CACHE_MAGIC: &[u8; 8] = b"DFLOGIT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    Full,
    TopK(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub mode: CacheMode,
    pub pool_id: String,
    pub data_seed: u64,
    pub vocab_size: usize,
    pub context_len: usize,
    pub batch_size: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    Full(Vec<f32>),
    TopK { ids: Vec<u32>, log_probs: Vec<f32>, rest: Vec<f32> },
}

#[derive(Debug, Clone)]
pub struct TeacherLogitCache<S> {
    header: CacheHeader,
    payload: Payload,
    _scalar: std::marker::PhantomData<S>,
}

impl<S: Scalar> TeacherLogitCache<S> {
    /// Runs the teacher over the batches `run` will consume.
    pub fn build(teacher: &ParameterSet<S>, run: &RunConfig, pool: &TokenPool, mode: CacheMode) -> Result<Self> {
        let vocab = teacher.config().vocab_size;
        if let CacheMode::TopK(k) = mode {
            if k == 0 || k > vocab {
                return Err(Error::InvalidArgument(format!("top-k {k} outside 1..={vocab}")));
            }
        }
        let ctx = run.model.context_len;
        let steps = run.total_steps();
        let mut stream = BatchStream::new(pool.with_seed(run.data_seed), ctx, run.batch_size);
        let positions = steps * run.batch_size * ctx;
        let mut payload = match mode {
            CacheMode::Full => Payload::Full(Vec::with_capacity(positions * vocab)),
            CacheMode::TopK(k) => Payload::TopK {
                ids: Vec::with_capacity(positions * k),
                log_probs: Vec::with_capacity(positions * k),
                rest: Vec::with_capacity(positions),
            },
        };
        let mut lp = vec![S::zero(); vocab];
        for _ in 0..steps {
            let batch = stream.next_batch()?;
            let logits = forward_logits(teacher, &batch.inputs, batch.batch_size, ctx)?;
            match &mut payload {
                Payload::Full(out) => out.extend(logits.iter().map(|x| x.to_f64_lossy() as f32)),
                Payload::TopK { ids, log_probs, rest } => {
                    let k = match mode {
                        CacheMode::TopK(k) => k,
                        CacheMode::Full => unreachable!(),
                    };
                    for row in logits.chunks_exact(vocab) {
                        log_softmax_into(row, S::one(), &mut lp);
                        let top = top_k_indices(&lp, k);
                        let kept: f64 = top.iter().map(|&i| lp[i as usize].to_f64_lossy().exp()).sum();
                        ids.extend_from_slice(&top);
                        log_probs.extend(top.iter().map(|&i| lp[i as usize].to_f64_lossy() as f32));
                        rest.push((1.0 - kept).max(0.0) as f32);
                    }
                }
            }
        }
        Ok(Self {
            header: CacheHeader {
                mode,
                pool_id: pool.pool_id().to_string(),
                data_seed: run.data_seed,
                vocab_size: vocab,
                context_len: ctx,
                batch_size: run.batch_size,
                steps,
            },
            payload,
            _scalar: std::marker::PhantomData,
        })
    }

    pub fn header(&self) -> &CacheHeader {
        &self.header
    }

    /// Errors unless this cache was built for the same stream `run` draws.
    pub fn check_compatible(&self, run: &RunConfig, pool: &TokenPool) -> Result<()> {
        let h = &self.header;
        let ok = h.pool_id == pool.pool_id()
            && h.data_seed == run.data_seed
            && h.vocab_size == run.model.vocab_size
            && h.context_len == run.model.context_len
            && h.batch_size == run.batch_size
            && h.steps >= run.total_steps();
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "logit cache for pool `{}` seed {} ({} steps of {}x{}) does not cover this run",
                h.pool_id, h.data_seed, h.steps, h.batch_size, h.context_len
            )))
        }
    }

    /// Teacher logits for training step `step`, `[batch, context, vocab]`.
    pub fn logits_for_step(&self, step: usize) -> Result<Vec<S>> {
        let h = &self.header;
        if step >= h.steps {
            return Err(Error::InvalidArgument(format!("step {step} beyond cached {} steps", h.steps)));
        }
        let rows = h.batch_size * h.context_len;
        let v = h.vocab_size;
        match &self.payload {
            Payload::Full(all) => Ok(all[step * rows * v..(step + 1) * rows * v]
                .iter()
                .map(|&x| S::from_f64_lossy(x as f64))
                .collect()),
            Payload::TopK { ids, log_probs, rest } => {
                let k = ids.len() / rest.len().max(1);
                let mut out = Vec::with_capacity(rows * v);
                for r in step * rows..(step + 1) * rows {
                    let fill = if k == v {
                        f64::NEG_INFINITY
                    } else {
                        (rest[r] as f64 / (v - k) as f64).max(f64::MIN_POSITIVE).ln()
                    };
                    let start = out.len();
                    out.resize(start + v, S::from_f64_lossy(fill));
                    for j in r * k..(r + 1) * k {
                        out[start + ids[j] as usize] = S::from_f64_lossy(log_probs[j] as f64);
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(LOGIT_CACHE_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let put_f32 = |out: &mut Vec<u8>, xs: &[f32]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        match &self.payload {
            Payload::Full(all) => put_f32(&mut out, all),
            Payload::TopK { ids, log_probs, rest } => {
                ids.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                put_f32(&mut out, log_probs);
                put_f32(&mut out, rest);
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != LOGIT_CACHE_MAGIC {
            return Err(Error::VersionMismatch {
                expected: "DFLOGIT1".into(),
                found: String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned(),
            });
        }
        let len: [u8; 8] = bytes
            .get(8..16)
            .ok_or_else(|| Error::Truncated("missing header length".into()))?
            .try_into()
            .expect("eight bytes");
        let end = 16usize
            .checked_add(u64::from_le_bytes(len) as usize)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Truncated("header extends past end of file".into()))?;
        let header: CacheHeader = serde_json::from_slice(&bytes[16..end])?;
        let rows = header.steps * header.batch_size * header.context_len;
        let body = &bytes[end..];
        let words = |b: &[u8]| -> Vec<[u8; 4]> { b.chunks_exact(4).map(|c| c.try_into().expect("four bytes")).collect() };
        let payload = match header.mode {
            CacheMode::Full => {
                let need = 4 * rows * header.vocab_size;
                check_len(body.len(), need)?;
                Payload::Full(words(body).into_iter().map(f32::from_le_bytes).collect())
            }
            CacheMode::TopK(k) => {
                let need = 4 * (2 * rows * k + rows);
                check_len(body.len(), need)?;
                let (id_bytes, rest_bytes) = body.split_at(4 * rows * k);
                let (lp_bytes, mass_bytes) = rest_bytes.split_at(4 * rows * k);
                let ids: Vec<u32> = words(id_bytes).into_iter().map(u32::from_le_bytes).collect();
                if let Some(&bad) = ids.iter().find(|&&i| i as usize >= header.vocab_size) {
                    return Err(Error::IdOutOfRange {
                        id: bad,
                        vocab_size: header.vocab_size,
                    });
                }
                Payload::TopK {
                    ids,
                    log_probs: words(lp_bytes).into_iter().map(f32::from_le_bytes).collect(),
                    rest: words(mass_bytes).into_iter().map(f32::from_le_bytes).collect(),
                }
            }
        };
        Ok(Self {
            header,
            payload,
            _scalar: std::marker::PhantomData,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("logits.tmp");
        fs::write(&tmp, self.encode()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn check_len(have: usize, need: usize) -> Result<()> {
    match have.cmp(&need) {
        std::cmp::Ordering::Less => Err(Error::Truncated(format!("payload has {have} bytes, need {need}"))),
        std::cmp::Ordering::Greater => Err(Error::ShapeMismatch(format!("{} trailing payload bytes", have - need))),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::softmax;
    use crate::training::Role;

    fn setup() -> (ParameterSet<f32>, RunConfig, TokenPool) {
        let model = ModelConfig {
            context_len: 8,
            ..ModelConfig::tiny()
        };
        let mut run = RunConfig::new(Role::Baseline, model.clone(), 2 * 4 * 8);
        run.batch_size = 4;
        run.data_seed = 5;
        let text: Vec<u8> = (0..2000u32).map(|i| b"the quick brown fox "[(i % 20) as usize]).collect();
        let pool = TokenPool::from_bytes("train", &text, 0);
        (ParameterSet::init(&model, 9).unwrap(), run, pool)
    }

    #[test]
    fn full_cache_matches_live_logits_bitwise() {
        let (teacher, run, pool) = setup();
        let cache = TeacherLogitCache::build(&teacher, &run, &pool, CacheMode::Full).unwrap();
        let mut stream = BatchStream::new(pool.with_seed(run.data_seed), 8, 4);
        for step in 0..2 {
            let batch = stream.next_batch().unwrap();
            let live = forward_logits(&teacher, &batch.inputs, 4, 8).unwrap();
            let cached = cache.logits_for_step(step).unwrap();
            assert!(live.iter().zip(&cached).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let back = TeacherLogitCache::<f32>::decode(&cache.encode().unwrap()).unwrap();
        assert_eq!(back.logits_for_step(1).unwrap(), cache.logits_for_step(1).unwrap());
    }

    #[test]
    fn top_k_reconstruction_keeps_head_and_total_mass() {
        let (teacher, run, pool) = setup();
        let full = TeacherLogitCache::build(&teacher, &run, &pool, CacheMode::Full).unwrap();
        let top = TeacherLogitCache::build(&teacher, &run, &pool, CacheMode::TopK(16)).unwrap();
        let a = full.logits_for_step(0).unwrap();
        let b = top.logits_for_step(0).unwrap();
        for (ra, rb) in a.chunks_exact(256).zip(b.chunks_exact(256)).take(5) {
            let pa = softmax(ra);
            let pb = softmax(rb);
            let total: f32 = pb.iter().sum();
            assert!((total - 1.0).abs() < 1e-4);
            for &i in &top_k_indices(ra, 16) {
                assert!((pa[i as usize] - pb[i as usize]).abs() < 1e-5);
            }
        }
        let back = TeacherLogitCache::<f32>::decode(&top.encode().unwrap()).unwrap();
        assert_eq!(back.logits_for_step(1).unwrap(), top.logits_for_step(1).unwrap());
    }

    #[test]
    fn mismatched_stream_is_rejected() {
        let (teacher, mut run, pool) = setup();
        let cache = TeacherLogitCache::build(&teacher, &run, &pool, CacheMode::TopK(4)).unwrap();
        cache.check_compatible(&run, &pool).unwrap();
        run.data_seed += 1;
        assert!(cache.check_compatible(&run, &pool).is_err());
        assert!(matches!(
            TeacherLogitCache::<f32>::decode(b"DFLOGIT0xxxxxxxx"),
            Err(Error::VersionMismatch { .. })
        ));
    }
}
