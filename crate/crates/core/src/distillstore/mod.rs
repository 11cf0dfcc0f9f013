//! Truncated next-token distributions and their on-disk snapshots.

mod preprocess;
mod snapshot;

pub use preprocess::{preprocess, PreprocessConfig};
pub use snapshot::{
    read_snapshots, read_snapshots_jsonl, write_snapshots, write_snapshots_jsonl, Mode, SnapshotFilter,
    SnapshotHeader, SnapshotRecord, SnapshotStore, SnapshotWriter,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tinylm::{softmax, TokenId};

/// Tolerance on `sum(probs) + residual == 1`.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Kept token ids with their probabilities, in descending probability
/// order, plus the probability mass that was truncated away.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseDistribution {
    token_ids: Vec<TokenId>,
    probs: Vec<f64>,
    residual: f64,
}

impl SparseDistribution {
    pub fn new(token_ids: Vec<TokenId>, probs: Vec<f64>, residual: f64) -> Result<Self> {
        let d = Self {
            token_ids,
            probs,
            residual,
        };
        d.validate(None)?;
        Ok(d)
    }

    /// Builds from unsorted `(id, prob)` pairs, sorting descending by
    /// probability (ties by id) and dropping zero-probability entries.
    pub fn from_pairs(mut pairs: Vec<(TokenId, f64)>, residual: f64) -> Result<Self> {
        pairs.retain(|&(_, p)| p > 0.0);
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let (ids, probs) = pairs.into_iter().unzip();
        Self::new(ids, probs, residual)
    }

    /// Point mass on a single token.
    pub fn one_hot(id: TokenId) -> Self {
        Self {
            token_ids: vec![id],
            probs: vec![1.0],
            residual: 0.0,
        }
    }

    pub fn token_ids(&self) -> &[TokenId] {
        &self.token_ids
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn kept_mass(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, f64)> + '_ {
        self.token_ids.iter().copied().zip(self.probs.iter().copied())
    }

    pub fn prob_of(&self, id: TokenId) -> Option<f64> {
        self.iter().find(|&(t, _)| t == id).map(|(_, p)| p)
    }

    /// Checks every invariant; `max_len` additionally bounds the number
    /// of kept entries.
    pub fn validate(&self, max_len: Option<usize>) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("invalid sparse distribution: {m}")));
        if self.token_ids.len() != self.probs.len() {
            return bad("ids and probs differ in length".into());
        }
        if let Some(k) = max_len {
            if self.len() > k {
                return bad(format!("{} entries exceed top_k {k}", self.len()));
            }
        }
        let mut ids = self.token_ids.clone();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate token id".into());
        }
        if self.probs.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return bad("probabilities must be finite and positive".into());
        }
        if self.probs.windows(2).any(|w| w[0] < w[1]) {
            return bad("probabilities not sorted descending".into());
        }
        if !(self.residual.is_finite() && self.residual >= 0.0) {
            return bad("residual must be finite and nonnegative".into());
        }
        let total = self.kept_mass() + self.residual;
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return bad(format!("total mass {total} != 1"));
        }
        Ok(())
    }
}

/// Truncation settings for stored teacher distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsifyParams {
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
}

impl Default for SparsifyParams {
    fn default() -> Self {
        Self {
            top_k: 10,
            top_p: 0.95,
            temperature: 2.0,
        }
    }
}

impl SparsifyParams {
    pub fn apply(&self, logits: &[f64]) -> Result<SparseDistribution> {
        sparsify(logits, self.top_p, self.top_k, self.temperature)
    }
}

/// Temperature → softmax → top-k → top-p truncation. The residual holds
/// whatever mass did not survive.
pub fn sparsify(logits: &[f64], top_p: f64, top_k: usize, temperature: f64) -> Result<SparseDistribution> {
    if logits.is_empty() || logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("logits must be non-empty and finite".into()));
    }
    if !(temperature > 0.0) || top_k == 0 || !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::invalid("need temperature > 0, top_k >= 1, top_p in (0, 1]"));
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let probs = softmax(&scaled);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(top_k);

    let mut cum = 0.0;
    let mut cut = order.len();
    for (i, &id) in order.iter().enumerate() {
        cum += probs[id];
        if cum >= top_p {
            cut = i + 1;
            break;
        }
    }
    order.truncate(cut);
    while order.last().is_some_and(|&id| probs[id] <= 0.0) {
        order.pop();
    }
    let kept: Vec<f64> = order.iter().map(|&id| probs[id]).collect();
    // nothing dropped means no residual, whatever the rounding says
    let residual = if kept.len() == logits.len() {
        0.0
    } else {
        (1.0 - kept.iter().sum::<f64>()).max(0.0)
    };
    Ok(SparseDistribution {
        token_ids: order.into_iter().map(|i| i as TokenId).collect(),
        probs: kept,
        residual,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualPolicy {
    /// Spread the residual evenly over every id not kept.
    UniformOverRest,
    /// Keep the residual as one extra outcome appended after the vocabulary.
    #[default]
    SingleBucket,
}

/// Expands to a dense vector of `vocab_size` entries (`vocab_size + 1`
/// for [`ResidualPolicy::SingleBucket`]).
pub fn densify(d: &SparseDistribution, vocab_size: usize, policy: ResidualPolicy) -> Result<Vec<f64>> {
    if let Some(&bad) = d.token_ids.iter().find(|&&id| id as usize >= vocab_size) {
        return Err(Error::invalid(format!("token id {bad} outside vocabulary of {vocab_size}")));
    }
    let mut dense = vec![0.0; vocab_size];
    for (id, p) in d.iter() {
        dense[id as usize] = p;
    }
    match policy {
        ResidualPolicy::SingleBucket => dense.push(d.residual),
        ResidualPolicy::UniformOverRest => {
            let rest = vocab_size - d.len();
            if rest > 0 && d.residual > 0.0 {
                let share = d.residual / rest as f64;
                let mut kept = vec![false; vocab_size];
                d.token_ids.iter().for_each(|&id| kept[id as usize] = true);
                for (v, k) in dense.iter_mut().zip(kept) {
                    if !k {
                        *v = share;
                    }
                }
            }
        }
    }
    Ok(dense)
}
