//! Cross-tokenizer alignment: vocabulary maps, position spans, and the
//! transfer of per-position distributions from a source vocabulary to the
//! target vocabulary.
//!
//! Token ids are mapped by exact string match first. Tokens without an
//! exact image either go to the target token sharing the longest prefix
//! with them or are dropped, in which case their probability joins the
//! residual bucket.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::distillstore::SparseDistribution;
use crate::error::{Error, Result};
use crate::tinylm::{TokenId, TokenizerSpec};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPolicy {
    #[default]
    LongestCommonPrefix,
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Exact,
    Fallback,
}

#[derive(Debug, Clone)]
pub struct AlignmentMap {
    source_tokenizer: TokenizerSpec,
    target_tokenizer: TokenizerSpec,
    policy: FallbackPolicy,
    /// Indexed by source id.
    images: Vec<Option<(TokenId, MapKind)>>,
}

#[derive(Debug, Serialize)]
struct MapEntry<'a> {
    source_id: TokenId,
    source: &'a str,
    target_id: Option<TokenId>,
    target: Option<&'a str>,
    kind: Option<MapKind>,
}

fn common_prefix_chars(a: &str, b: &str) -> usize {
    a.chars().zip(b.chars()).take_while(|(x, y)| x == y).count()
}

pub fn build_alignment_map(src: &TokenizerSpec, tgt: &TokenizerSpec, policy: FallbackPolicy) -> AlignmentMap {
    let images = src
        .vocab()
        .iter()
        .map(|tok| {
            if let Some(id) = tgt.id_of(tok) {
                return Some((id, MapKind::Exact));
            }
            match policy {
                FallbackPolicy::Drop => None,
                FallbackPolicy::LongestCommonPrefix => {
                    // longest shared prefix; true prefixes of `tok` win ties, then lower ids
                    let mut best: Option<(usize, bool, TokenId)> = None;
                    for (id, cand) in tgt.vocab().iter().enumerate() {
                        let id = id as TokenId;
                        if tgt.is_special(id) {
                            continue;
                        }
                        let n = common_prefix_chars(tok, cand);
                        if n == 0 {
                            continue;
                        }
                        let whole = n == cand.chars().count();
                        let better = match best {
                            None => true,
                            Some((bn, bw, _)) => n > bn || (n == bn && whole && !bw),
                        };
                        if better {
                            best = Some((n, whole, id));
                        }
                    }
                    best.map(|(_, _, id)| (id, MapKind::Fallback))
                }
            }
        })
        .collect();
    AlignmentMap {
        source_tokenizer: src.clone(),
        target_tokenizer: tgt.clone(),
        policy,
        images,
    }
}

impl AlignmentMap {
    pub fn policy(&self) -> FallbackPolicy {
        self.policy
    }

    pub fn source_tokenizer(&self) -> &TokenizerSpec {
        &self.source_tokenizer
    }

    pub fn target_tokenizer(&self) -> &TokenizerSpec {
        &self.target_tokenizer
    }

    pub fn image(&self, source_id: TokenId) -> Option<(TokenId, MapKind)> {
        self.images.get(source_id as usize).copied().flatten()
    }

    pub fn exact(&self, source_id: TokenId) -> Option<TokenId> {
        self.image(source_id).filter(|(_, k)| *k == MapKind::Exact).map(|(t, _)| t)
    }

    pub fn is_identity(&self) -> bool {
        self.images
            .iter()
            .enumerate()
            .all(|(i, im)| *im == Some((i as TokenId, MapKind::Exact)))
    }

    /// JSON listing of every source token and where it maps.
    pub fn to_json(&self) -> serde_json::Value {
        let entries: Vec<MapEntry> = self
            .source_tokenizer
            .vocab()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let im = self.images[i];
                MapEntry {
                    source_id: i as TokenId,
                    source: s,
                    target_id: im.map(|(t, _)| t),
                    target: im.and_then(|(t, _)| self.target_tokenizer.token_str(t)),
                    kind: im.map(|(_, k)| k),
                }
            })
            .collect();
        serde_json::json!({
            "policy": self.policy,
            "source_vocab_hash": self.source_tokenizer.vocab_hash(),
            "target_vocab_hash": self.target_tokenizer.vocab_hash(),
            "entries": entries,
        })
    }
}

/// Moves probability mass through `map`. Colliding targets accumulate,
/// unmapped mass joins the residual, and the original ordering is kept for
/// ties so that an identity map returns its input unchanged.
pub fn project_distribution(dist: &SparseDistribution, map: &AlignmentMap) -> Result<SparseDistribution> {
    project_with(dist, |id| map.image(id).map(|(t, _)| t))
}

fn project_with(dist: &SparseDistribution, image: impl Fn(TokenId) -> Option<TokenId>) -> Result<SparseDistribution> {
    let mut pairs: Vec<(TokenId, f64)> = Vec::with_capacity(dist.len());
    let mut residual = dist.residual();
    for (id, p) in dist.iter() {
        match image(id) {
            Some(t) => match pairs.iter_mut().find(|(q, _)| *q == t) {
                Some(slot) => slot.1 += p,
                None => pairs.push((t, p)),
            },
            None => residual += p,
        }
    }
    let total: f64 = pairs.iter().map(|(_, p)| p).sum::<f64>() + residual;
    if (total - 1.0).abs() > 1e-12 {
        pairs.iter_mut().for_each(|(_, p)| *p /= total);
        residual /= total;
    }
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1));
    let (ids, probs) = pairs.into_iter().unzip();
    SparseDistribution::new(ids, probs, residual)
}

/// Ordered `(source span, target span)` pairs whose decoded texts agree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionAlignment {
    pub pairs: Vec<(Range<usize>, Range<usize>)>,
}

fn char_ends(tokens: &[TokenId], tok: &TokenizerSpec) -> Vec<usize> {
    let mut ends = Vec::with_capacity(tokens.len() + 1);
    ends.push(0);
    let mut acc = 0;
    for &t in tokens {
        acc += tok.token_text(t).chars().count();
        ends.push(acc);
    }
    ends
}

/// Boundary sweep: a span pair closes wherever both token streams end at
/// the same character offset.
pub fn align_positions(
    src_tokens: &[TokenId],
    src_tok: &TokenizerSpec,
    tgt_tokens: &[TokenId],
    tgt_tok: &TokenizerSpec,
) -> Result<PositionAlignment> {
    let (st, tt) = (src_tok.decode(src_tokens), tgt_tok.decode(tgt_tokens));
    if st != tt {
        return Err(Error::Alignment(format!("decoded texts differ: {st:?} vs {tt:?}")));
    }
    let se = char_ends(src_tokens, src_tok);
    let te = char_ends(tgt_tokens, tgt_tok);
    let (ns, nt) = (src_tokens.len(), tgt_tokens.len());
    let mut pairs: Vec<(Range<usize>, Range<usize>)> = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < ns && j < nt {
        let (i0, j0) = (i, j);
        i += 1;
        j += 1;
        while se[i] != te[j] {
            if se[i] < te[j] {
                i += 1;
            } else {
                j += 1;
            }
        }
        pairs.push((i0..i, j0..j));
    }
    // whatever remains on one side is zero-width; fold it into the last pair
    if i < ns || j < nt {
        match pairs.last_mut() {
            Some(last) => {
                last.0.end = ns;
                last.1.end = nt;
            }
            None => pairs.push((0..ns, 0..nt)),
        }
    }
    Ok(PositionAlignment { pairs })
}

/// Teacher rows re-indexed onto the target token positions.
///
/// The first target position of each span receives the projected row of
/// the span's first source position, the only source row conditioned on
/// the same text prefix. When the two tokenizations split the span
/// differently, the mass that row puts on the span's own first source token
/// is credited to the span's first target token instead of that token's
/// vocabulary image. Later positions inside a span are determined by the
/// span text and get a point mass on the target token.
pub fn transfer_rows(
    src_tokens: &[TokenId],
    src_rows: &[SparseDistribution],
    tgt_tokens: &[TokenId],
    map: &AlignmentMap,
) -> Result<Vec<SparseDistribution>> {
    if src_rows.len() != src_tokens.len() {
        return Err(Error::ShapeMismatch("one source row per source token required".into()));
    }
    if map.is_identity() && src_tokens == tgt_tokens {
        return Ok(src_rows.to_vec());
    }
    let pa = align_positions(src_tokens, map.source_tokenizer(), tgt_tokens, map.target_tokenizer())?;
    let mut out = Vec::with_capacity(tgt_tokens.len());
    for (s, t) in pa.pairs {
        for (k, pos) in t.enumerate() {
            if k == 0 && !s.is_empty() {
                let (s0, t0) = (src_tokens[s.start], tgt_tokens[pos]);
                let row = &src_rows[s.start];
                if map.source_tokenizer().token_text(s0) == map.target_tokenizer().token_text(t0) {
                    out.push(project_distribution(row, map)?);
                } else {
                    out.push(project_with(row, |id| {
                        if id == s0 {
                            Some(t0)
                        } else {
                            map.image(id).map(|(t, _)| t)
                        }
                    })?);
                }
            } else {
                out.push(SparseDistribution::one_hot(tgt_tokens[pos]));
            }
        }
    }
    Ok(out)
}
