//! Byte-level corpus handling: tokenization, pool splitting and
//! non-repeating, seed-determined batch streams.
//!
//! A pool is cut into contiguous windows of `context_len + 1` tokens. Each
//! window yields one batch row: the first `context_len` tokens are inputs,
//! the last `context_len` are targets. The order in which windows are
//! visited is a keyed pseudo-random permutation, evaluated per position, so
//! a stream never stores its permutation and never visits a window twice.

use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BYTE_VOCAB_SIZE: usize = 256;

pub const DEFAULT_CONTEXT_LEN: usize = 256;
pub const DEFAULT_BATCH_SIZE: usize = 16;

/// One token id per input byte.
pub fn tokenize(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

/// Inverse of [`tokenize`]. Ids above 255 are rejected.
pub fn decode(tokens: &[u32]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| Error::IdOutOfRange {
                id: t,
                vocab_size: BYTE_VOCAB_SIZE,
            })
        })
        .collect()
}

/// Immutable token sequence plus the seed that orders its batch stream.
#[derive(Debug, Clone)]
pub struct TokenPool {
    pool_id: String,
    tokens: Arc<[u32]>,
    vocab_size: usize,
    seed: u64,
    byte_offsets: (usize, usize),
}

impl TokenPool {
    pub fn new(pool_id: impl Into<String>, tokens: Vec<u32>, vocab_size: usize, seed: u64) -> Result<Self> {
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::IdOutOfRange { id, vocab_size });
        }
        let len = tokens.len();
        Ok(Self {
            pool_id: pool_id.into(),
            tokens: tokens.into(),
            vocab_size,
            seed,
            byte_offsets: (0, len),
        })
    }

    pub fn from_bytes(pool_id: impl Into<String>, bytes: &[u8], seed: u64) -> Self {
        Self {
            pool_id: pool_id.into(),
            tokens: tokenize(bytes).into(),
            vocab_size: BYTE_VOCAB_SIZE,
            seed,
            byte_offsets: (0, bytes.len()),
        }
    }

    /// Same content, different stream seed. Shares the token buffer.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn pool_id(&self) -> &str {
        &self.pool_id
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Half-open byte range of the source corpus this pool covers.
    pub fn byte_offsets(&self) -> (usize, usize) {
        self.byte_offsets
    }

    pub fn manifest(&self) -> PoolManifest {
        PoolManifest {
            pool_id: self.pool_id.clone(),
            byte_offsets: [self.byte_offsets.0 as u64, self.byte_offsets.1 as u64],
            seed: self.seed,
            vocab_size: self.vocab_size,
        }
    }
}

/// Persisted description of a pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub pool_id: String,
    pub byte_offsets: [u64; 2],
    pub seed: u64,
    pub vocab_size: usize,
}

impl PoolManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[derive(Debug, Clone)]
pub struct Pools {
    pub train: TokenPool,
    pub held_out: TokenPool,
    pub ood: Vec<TokenPool>,
}

impl Pools {
    /// Held-out pool followed by every out-of-distribution pool.
    pub fn eval_pools(&self) -> impl Iterator<Item = &TokenPool> {
        std::iter::once(&self.held_out).chain(self.ood.iter())
    }
}

/// Splits `corpus` into a leading training range and a trailing held-out
/// range; `ood` corpora become one pool each, tagged by name.
pub fn build_pools(
    corpus: &[u8],
    held_out_fraction: f64,
    seed: u64,
    context_len: usize,
    ood: &[(String, Vec<u8>)],
) -> Result<Pools> {
    if !(held_out_fraction > 0.0 && held_out_fraction < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "held-out fraction {held_out_fraction} must lie in (0, 0.5)"
        )));
    }
    let window = context_len + 1;
    let n = corpus.len();
    let held = (n as f64 * held_out_fraction).round() as usize;
    let train_len = n - held;
    for (what, len) in [("training split", train_len), ("held-out split", held)] {
        if len < window {
            return Err(Error::CorpusTooSmall {
                what: what.to_string(),
                needed: window,
                available: len,
            });
        }
    }
    let mut train = TokenPool::from_bytes("train", &corpus[..train_len], seed);
    let mut held_out = TokenPool::from_bytes("held_out", &corpus[train_len..], seed);
    held_out.byte_offsets = (train_len, n);
    train.byte_offsets = (0, train_len);

    let mut ood_pools = Vec::with_capacity(ood.len());
    for (name, bytes) in ood {
        if bytes.len() < window {
            return Err(Error::CorpusTooSmall {
                what: format!("pool `{name}`"),
                needed: window,
                available: bytes.len(),
            });
        }
        ood_pools.push(TokenPool::from_bytes(name.clone(), bytes, seed));
    }
    Ok(Pools {
        train,
        held_out,
        ood: ood_pools,
    })
}

/// Inputs and next-token targets, both `[batch_size, context_len]` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch_size: usize,
    pub context_len: usize,
    /// Pool window index of each row.
    pub windows: Vec<usize>,
}

impl Batch {
    /// Builds a batch from whole windows of `context_len + 1` tokens.
    pub fn from_windows(rows: &[&[u32]], context_len: usize) -> Result<Self> {
        let mut inputs = Vec::with_capacity(rows.len() * context_len);
        let mut targets = Vec::with_capacity(rows.len() * context_len);
        for row in rows {
            if row.len() != context_len + 1 {
                return Err(Error::ShapeMismatch(format!(
                    "window of {} tokens, expected {}",
                    row.len(),
                    context_len + 1
                )));
            }
            inputs.extend_from_slice(&row[..context_len]);
            targets.extend_from_slice(&row[1..]);
        }
        Ok(Self {
            inputs,
            targets,
            batch_size: rows.len(),
            context_len,
            windows: Vec::new(),
        })
    }

    pub fn input_row(&self, b: usize) -> &[u32] {
        &self.inputs[b * self.context_len..(b + 1) * self.context_len]
    }

    pub fn target_row(&self, b: usize) -> &[u32] {
        &self.targets[b * self.context_len..(b + 1) * self.context_len]
    }

    pub fn num_tokens(&self) -> usize {
        self.batch_size * self.context_len
    }
}

/// Position of a stream within its window permutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StreamState {
    pub next_window: usize,
}

/// Number of whole `context_len + 1` windows in a pool.
pub fn num_windows(pool: &TokenPool, context_len: usize) -> usize {
    pool.len() / (context_len + 1)
}

pub fn window_span(window: usize, context_len: usize) -> Range<usize> {
    let w = context_len + 1;
    window * w..(window + 1) * w
}

/// Pure form of the stream: returns the next batch and the advanced state.
pub fn next_batch(
    pool: &TokenPool,
    state: StreamState,
    context_len: usize,
    batch_size: usize,
) -> Result<(Batch, StreamState)> {
    let total = num_windows(pool, context_len);
    let remaining = total.saturating_sub(state.next_window);
    if remaining < batch_size || batch_size == 0 {
        return Err(Error::PoolExhausted {
            remaining: remaining * (context_len + 1),
            needed: batch_size * (context_len + 1),
        });
    }
    let perm = WindowPermutation::new(total, pool.seed());
    let windows: Vec<usize> = (state.next_window..state.next_window + batch_size)
        .map(|pos| perm.apply(pos))
        .collect();
    let rows: Vec<&[u32]> = windows
        .iter()
        .map(|&w| &pool.tokens()[window_span(w, context_len)])
        .collect();
    let mut batch = Batch::from_windows(&rows, context_len)?;
    batch.windows = windows;
    Ok((
        batch,
        StreamState {
            next_window: state.next_window + batch_size,
        },
    ))
}

/// Stateful wrapper over [`next_batch`].
#[derive(Debug, Clone)]
pub struct BatchStream {
    pool: TokenPool,
    context_len: usize,
    batch_size: usize,
    state: StreamState,
}

impl BatchStream {
    pub fn new(pool: TokenPool, context_len: usize, batch_size: usize) -> Self {
        Self {
            pool,
            context_len,
            batch_size,
            state: StreamState::default(),
        }
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let (batch, state) = next_batch(&self.pool, self.state, self.context_len, self.batch_size)?;
        self.state = state;
        Ok(batch)
    }

    pub fn state(&self) -> StreamState {
        self.state
    }

    /// Batches this stream can still produce.
    pub fn remaining_batches(&self) -> usize {
        (num_windows(&self.pool, self.context_len) - self.state.next_window) / self.batch_size.max(1)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Keyed bijection on `0..n`: a four-round Feistel network over the
/// smallest even-bit power-of-two domain, with cycle walking.
#[derive(Debug, Clone, Copy)]
pub struct WindowPermutation {
    n: usize,
    half_bits: u32,
    keys: [u64; 4],
}

impl WindowPermutation {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut bits = 2;
        while (1u128 << bits) < n as u128 {
            bits += 2;
        }
        let mut keys = [0u64; 4];
        for (r, k) in keys.iter_mut().enumerate() {
            *k = splitmix64(seed ^ splitmix64(r as u64 + 1));
        }
        Self {
            n,
            half_bits: bits / 2,
            keys,
        }
    }

    fn feistel(&self, x: u64) -> u64 {
        let mask = (1u64 << self.half_bits) - 1;
        let mut left = x >> self.half_bits;
        let mut right = x & mask;
        for &k in &self.keys {
            let f = splitmix64(right ^ k) & mask;
            let next = left ^ f;
            left = right;
            right = next;
        }
        (left << self.half_bits) | right
    }

    pub fn apply(&self, position: usize) -> usize {
        assert!(position < self.n, "position {position} outside 0..{}", self.n);
        let mut x = position as u64;
        loop {
            x = self.feistel(x);
            if (x as usize) < self.n {
                return x as usize;
            }
        }
    }
}
