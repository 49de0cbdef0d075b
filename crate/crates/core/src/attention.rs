//! Dense, KV-cached and sparse-window attention, plus the local/strided
//! baselines and the sparsity/correlation metrics used by the analysis.
//!
//! Position indices always refer to absolute token positions in the
//! sequence, with the newest (current) token at `n - 1`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dense,
    Swa,
    Local,
    Strided,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Dense => "dense",
            Variant::Swa => "swa",
            Variant::Local => "local",
            Variant::Strided => "strided",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Variant::Dense),
            "swa" => Ok(Variant::Swa),
            "local" => Ok(Variant::Local),
            "strided" => Ok(Variant::Strided),
            other => Err(Error::Config(format!(
                "unknown attention variant {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityConfig {
    pub variant: Variant,
    /// Caching ratio `r`: the fraction of tokens whose KV takes part in a step.
    pub ratio: f64,
    /// Only used by the strided variant. Defaults to `max(2, round(1/r))`.
    #[serde(default)]
    pub stride: Option<usize>,
}

impl SparsityConfig {
    pub fn dense() -> Self {
        SparsityConfig {
            variant: Variant::Dense,
            ratio: 1.0,
            stride: None,
        }
    }

    pub fn swa(ratio: f64) -> Self {
        SparsityConfig {
            variant: Variant::Swa,
            ratio,
            stride: None,
        }
    }

    pub fn with_variant(self, variant: Variant) -> Self {
        SparsityConfig { variant, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Config(format!(
                "sparsity.ratio must be in (0, 1], got {}",
                self.ratio
            )));
        }
        if self.stride == Some(0) {
            return Err(Error::Config("sparsity.stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Caching ratio the scheduler should plan for. Dense attention keeps everything.
    pub fn planning_ratio(&self) -> f64 {
        match self.variant {
            Variant::Dense => 1.0,
            _ => self.ratio,
        }
    }

    pub fn effective_stride(&self) -> usize {
        self.stride
            .unwrap_or_else(|| (math::round_even(1.0 / self.ratio) as usize).max(2))
    }

    pub fn local_window(&self, n: usize) -> usize {
        ((math::round_even(n as f64 * self.ratio)) as usize).clamp(1, n.max(1))
    }
}

/// Tokens kept by sparse window attention at one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseSelection {
    /// The `k` most recent positions, always kept.
    pub local_indices: Vec<usize>,
    /// Earlier positions with the largest local attention sum.
    pub global_indices: Vec<usize>,
    pub k: usize,
}

impl SparseSelection {
    /// Sorted union of local and global positions.
    pub fn indices(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .global_indices
            .iter()
            .chain(&self.local_indices)
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    fn all(n: usize, k: usize) -> Self {
        let k = k.min(n);
        SparseSelection {
            local_indices: (n - k..n).collect(),
            global_indices: (0..n - k).collect(),
            k,
        }
    }
}

/// Half of the kept budget: `round(n·r/2)`, at least one.
pub fn swa_k(n: usize, ratio: f64) -> usize {
    (math::round_even(n as f64 * ratio / 2.0) as usize).max(1)
}

/// Local/global split of the positions SWA keeps out of `n`, without
/// looking at any scores. Returns `(local, global)` counts.
pub fn swa_split(n: usize, ratio: f64) -> (usize, usize) {
    if n < 2 {
        return (n, 0);
    }
    let k = swa_k(n, ratio).min(n);
    if ratio >= 1.0 || 2 * k >= n {
        (k, n - k)
    } else {
        (k, k)
    }
}

/// Picks the SWA token set for a sequence of `n` tokens.
///
/// `local_sum` holds the accumulated recent attention per position and must
/// cover at least the `n - k` global candidates. With `r = 1`, or whenever
/// `2k >= n`, every position is kept.
pub fn swa_select(local_sum: &[f64], n: usize, ratio: f64) -> Result<SparseSelection> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::contract(format!(
            "caching ratio {ratio} not in (0, 1]"
        )));
    }
    if n < 2 {
        return Ok(SparseSelection::all(n, n));
    }
    let k = swa_k(n, ratio).min(n);
    if ratio >= 1.0 || 2 * k >= n {
        return Ok(SparseSelection::all(n, k));
    }
    let candidates = n - k;
    if local_sum.len() < candidates {
        return Err(Error::contract(format!(
            "local sum covers {} positions, need {candidates}",
            local_sum.len()
        )));
    }
    let global_indices = math::top_k_indices(&local_sum[..candidates], k)?;
    Ok(SparseSelection {
        local_indices: (candidates..n).collect(),
        global_indices,
        k,
    })
}

/// The `window` most recent of `n` positions.
pub fn local_attention_mask(n: usize, window: usize) -> Vec<usize> {
    let w = window.max(1).min(n);
    (n - w..n).collect()
}

/// Every `stride`-th position counting back from the newest one.
pub fn strided_attention_mask(n: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    (0..n)
        .filter(|p| (n - 1 - p).is_multiple_of(stride))
        .collect()
}

/// Token positions taking part in one decode step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSelection {
    pub indices: Vec<usize>,
    pub swa: Option<SparseSelection>,
}

/// Dense scaled dot-product attention for one head.
///
/// With `causal`, query row `i` sees key rows `0..=i + (k.rows - q.rows)`,
/// so a suffix of queries can be attended against the full key set.
/// Returns `(attn, aw)`.
pub fn dense_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    causal: bool,
) -> Result<(Matrix, Matrix)> {
    if q.cols() != k.cols() || k.cols() != v.cols() || k.rows() != v.rows() {
        return Err(Error::contract(format!(
            "attention shapes q {}x{}, k {}x{}, v {}x{}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    if k.rows() == 0 || q.rows() == 0 {
        return Err(Error::contract("attention over an empty key set"));
    }
    if causal && q.rows() > k.rows() {
        return Err(Error::contract(
            "causal attention with more queries than keys",
        ));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut logits = math::matmul_transposed(q, k)?;
    let offset = k.rows() - q.rows();
    for i in 0..logits.rows() {
        let row = logits.row_mut(i);
        for (j, x) in row.iter_mut().enumerate() {
            *x = if causal && j > i + offset {
                f64::NEG_INFINITY
            } else {
                *x * scale
            };
        }
        math::softmax_in_place(row);
    }
    let attn = math::matmul(&logits, v)?;
    Ok((attn, logits))
}

/// Per-head KV cache of one layer plus the attention history SWA needs.
#[derive(Debug, Clone)]
pub struct AttentionState {
    head_count: usize,
    head_dim: usize,
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
    /// Last attention row per head (heads × tokens it covered).
    prev_rows: Option<Matrix>,
    /// Head-summed attention rows of the most recent steps, newest last.
    history: VecDeque<Vec<f64>>,
}

impl AttentionState {
    pub fn new(head_count: usize, head_dim: usize) -> Self {
        AttentionState {
            head_count,
            head_dim,
            keys: (0..head_count)
                .map(|_| Matrix::zeros(0, head_dim))
                .collect(),
            values: (0..head_count)
                .map(|_| Matrix::zeros(0, head_dim))
                .collect(),
            prev_rows: None,
            history: VecDeque::new(),
        }
    }

    pub fn head_count(&self) -> usize {
        self.head_count
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Number of cached tokens.
    pub fn len(&self) -> usize {
        self.keys[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self, head: usize) -> &Matrix {
        &self.keys[head]
    }

    pub fn values(&self, head: usize) -> &Matrix {
        &self.values[head]
    }

    pub fn prev_attention_rows(&self) -> Option<&Matrix> {
        self.prev_rows.as_ref()
    }

    /// Appends one token; `k` and `v` are `heads × head_dim`.
    pub fn append(&mut self, k: &Matrix, v: &Matrix) -> Result<()> {
        self.check_token_shape(k, v)?;
        for h in 0..self.head_count {
            self.keys[h].push_row(k.row(h))?;
            self.values[h].push_row(v.row(h))?;
        }
        Ok(())
    }

    /// Overwrites the cached KV of token `pos` (used when recomputing).
    pub fn replace(&mut self, pos: usize, k: &Matrix, v: &Matrix) -> Result<()> {
        self.check_token_shape(k, v)?;
        if pos >= self.len() {
            return Err(Error::contract(format!("replace of uncached token {pos}")));
        }
        for h in 0..self.head_count {
            self.keys[h].row_mut(pos).copy_from_slice(k.row(h));
            self.values[h].row_mut(pos).copy_from_slice(v.row(h));
        }
        Ok(())
    }

    /// KV of one cached token as `(k, v)`, each `heads × head_dim`.
    pub fn token(&self, pos: usize) -> (Matrix, Matrix) {
        let mut k = Matrix::zeros(self.head_count, self.head_dim);
        let mut v = Matrix::zeros(self.head_count, self.head_dim);
        for h in 0..self.head_count {
            k.row_mut(h).copy_from_slice(self.keys[h].row(pos));
            v.row_mut(h).copy_from_slice(self.values[h].row(pos));
        }
        (k, v)
    }

    fn check_token_shape(&self, k: &Matrix, v: &Matrix) -> Result<()> {
        let want = (self.head_count, self.head_dim);
        if (k.rows(), k.cols()) != want || (v.rows(), v.cols()) != want {
            return Err(Error::contract(format!(
                "token KV must be {}x{}",
                self.head_count, self.head_dim
            )));
        }
        Ok(())
    }

    /// Seeds the attention history from a dense prefill. `aw` holds one
    /// `s × s` causal weight matrix per head.
    pub fn seed_from_prefill(&mut self, aw: &[Matrix]) -> Result<()> {
        if aw.len() != self.head_count {
            return Err(Error::contract("prefill weights per head mismatch"));
        }
        let s = aw[0].rows();
        if s == 0 {
            return Ok(());
        }
        let mut last = Matrix::zeros(self.head_count, s);
        for (h, m) in aw.iter().enumerate() {
            last.row_mut(h).copy_from_slice(m.row(s - 1));
        }
        self.prev_rows = Some(last);
        self.history.clear();
        let keep = Self::history_cap(s);
        for r in s.saturating_sub(keep)..s {
            let mut row = vec![0.0; r + 1];
            for m in aw {
                for (acc, x) in row.iter_mut().zip(&m.row(r)[..=r]) {
                    *acc += x;
                }
            }
            self.history.push_back(row);
        }
        Ok(())
    }

    // k never exceeds round(n/2) and grows by at most one per step
    fn history_cap(tokens: usize) -> usize {
        (tokens + 3) / 2
    }

    /// Sum of the last `k` recorded attention rows over positions `0..n-1`,
    /// where `n` is the current token count.
    pub fn local_sum(&self, k: usize) -> Vec<f64> {
        let n = self.len();
        let mut sum = vec![0.0; n.saturating_sub(1)];
        for row in self.history.iter().rev().take(k) {
            for (acc, x) in sum.iter_mut().zip(row) {
                *acc += x;
            }
        }
        sum
    }

    /// Token positions the configured variant attends to at this step.
    pub fn select(&mut self, cfg: &SparsityConfig) -> Result<TokenSelection> {
        let n = self.len();
        if n == 0 {
            return Err(Error::contract("attention over an empty cache"));
        }
        Ok(match cfg.variant {
            Variant::Dense => TokenSelection {
                indices: (0..n).collect(),
                swa: None,
            },
            Variant::Swa => {
                let k = swa_k(n, cfg.ratio);
                while self.history.len() > k {
                    self.history.pop_front();
                }
                let sel = swa_select(&self.local_sum(k), n, cfg.ratio)?;
                TokenSelection {
                    indices: sel.indices(),
                    swa: Some(sel),
                }
            }
            Variant::Local => TokenSelection {
                indices: local_attention_mask(n, cfg.local_window(n)),
                swa: None,
            },
            Variant::Strided => TokenSelection {
                indices: strided_attention_mask(n, cfg.effective_stride()),
                swa: None,
            },
        })
    }

    /// Attends `q` (`heads × head_dim`, one decode query per head) over the
    /// gathered `indices` and records the resulting weights as history.
    pub fn attend(&mut self, q: &Matrix, indices: &[usize]) -> Result<StepAttention> {
        let out = gathered_attention(q, &self.keys, &self.values, indices)?;
        let reduced = head_sum(&out.aw_rows);
        self.history.push_back(reduced);
        let cap = Self::history_cap(self.len() + 1);
        while self.history.len() > cap {
            self.history.pop_front();
        }
        self.prev_rows = Some(out.aw_rows.clone());
        Ok(out)
    }

    /// Dense weights of `q` over every cached token, without touching history.
    pub fn reference_weights(&self, q: &Matrix) -> Result<Matrix> {
        let all: Vec<usize> = (0..self.len()).collect();
        Ok(gathered_attention(q, &self.keys, &self.values, &all)?.aw_rows)
    }
}

#[derive(Debug, Clone)]
pub struct StepAttention {
    /// `heads × head_dim` attention output.
    pub attn: Matrix,
    /// `heads × n` weights scattered to full length, zero where unselected.
    pub aw_rows: Matrix,
}

/// Gathers the selected rows of every head's cache into dense matrices and
/// attends over them.
pub fn gathered_attention(
    q: &Matrix,
    keys: &[Matrix],
    values: &[Matrix],
    indices: &[usize],
) -> Result<StepAttention> {
    let heads = keys.len();
    if q.rows() != heads || heads == 0 {
        return Err(Error::contract(format!(
            "query has {} rows for {heads} heads",
            q.rows()
        )));
    }
    if indices.is_empty() {
        return Err(Error::contract("empty token selection"));
    }
    let n = keys[0].rows();
    let d = keys[0].cols();
    let mut attn = Matrix::zeros(heads, d);
    let mut aw_rows = Matrix::zeros(heads, n);
    for h in 0..heads {
        let ks = keys[h].gather_rows(indices)?;
        let vs = values[h].gather_rows(indices)?;
        let qh = Matrix::from_vec(1, q.cols(), q.row(h).to_vec())?;
        let (a, w) = dense_attention(&qh, &ks, &vs, false)?;
        attn.row_mut(h).copy_from_slice(a.row(0));
        let full = aw_rows.row_mut(h);
        for (&pos, &x) in indices.iter().zip(w.row(0)) {
            full[pos] = x;
        }
    }
    Ok(StepAttention { attn, aw_rows })
}

pub fn head_sum(rows: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; rows.cols()];
    for h in 0..rows.rows() {
        for (acc, x) in out.iter_mut().zip(rows.row(h)) {
            *acc += x;
        }
    }
    out
}

/// `(sparse, counted)` entries of one row: entries below `rel_threshold`
/// times the row max. An all-zero row counts entirely as sparse.
pub fn row_sparsity_counts(row: &[f64], rel_threshold: f64) -> (usize, usize) {
    let max = row.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return (row.len(), row.len());
    }
    let cut = rel_threshold * max;
    (row.iter().filter(|&&x| x < cut).count(), row.len())
}

/// Fraction of entries of `aw` below `rel_threshold` of their row maximum.
pub fn attention_sparsity(aw: &Matrix, rel_threshold: f64) -> Result<f64> {
    if aw.rows() == 0 || aw.cols() == 0 {
        return Err(Error::contract("sparsity of an empty weight matrix"));
    }
    let (mut sparse, mut total) = (0, 0);
    for r in 0..aw.rows() {
        let (s, t) = row_sparsity_counts(aw.row(r), rel_threshold);
        sparse += s;
        total += t;
    }
    Ok(sparse as f64 / total as f64)
}

/// Like [`attention_sparsity`] for a square causal map: entries above the
/// diagonal are masked and excluded from the count.
pub fn causal_attention_sparsity(aw: &Matrix, rel_threshold: f64) -> Result<f64> {
    if aw.rows() == 0 || aw.rows() != aw.cols() {
        return Err(Error::contract(
            "causal sparsity needs a square weight matrix",
        ));
    }
    let (mut sparse, mut total) = (0, 0);
    for r in 0..aw.rows() {
        let (s, t) = row_sparsity_counts(&aw.row(r)[..=r], rel_threshold);
        sparse += s;
        total += t;
    }
    Ok(sparse as f64 / total as f64)
}

/// Spearman correlation between a dense and a sparse score distribution.
pub fn score_distribution_correlation(dense_scores: &[f64], sparse_scores: &[f64]) -> Result<f64> {
    math::spearman(dense_scores, sparse_scores)
}
