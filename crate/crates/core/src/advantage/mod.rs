//! Per-example advantage evaluation.
//!
//! Training mode ranks source models by teacher-forced cross-entropy on the
//! ground truth (lowest wins). Inference mode lets each source generate a
//! response and has a panel of reward scorers vote; the plurality wins and
//! a designated strongest scorer settles tied votes.

mod metrics;
mod scorers;

pub use metrics::{
    cosine, lcs_len, mean_embedding, reference_score, rouge_l, sentence_bleu, MetricUnit, ReferenceScoreBreakdown,
    BLEU_WEIGHT, ROUGE_WEIGHT, SEMANTIC_WEIGHT,
};
pub use scorers::{
    FnScorer, LogLikelihoodScorer, ReferenceSimilarityScorer, RewardScorer, ScoreContext, TaskCorrectnessScorer,
};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::distillstore::{sparsify, Mode, SnapshotStore, SparseDistribution, SparsifyParams};
use crate::error::{Error, Result};
use crate::tinylm::{DecodingParams, TinyLM, TokenId};

/// A source model together with the id its snapshots are stored under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceModel {
    pub id: String,
    pub model: TinyLM,
}

impl SourceModel {
    pub fn new(id: impl Into<String>, model: TinyLM) -> Self {
        Self { id: id.into(), model }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeNormalization {
    /// Total negative log-likelihood over the model's own tokens.
    #[default]
    Sum,
    /// Per-token mean.
    Mean,
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Supervised token sequence for a text: its encoding followed by EOS.
pub fn supervised_tokens(model: &TinyLM, text: &str) -> Vec<TokenId> {
    let mut y = model.tokenizer().encode(text);
    y.push(model.tokenizer().eos());
    y
}

/// Cross-entropy of `response` (plus EOS) under each model's own
/// tokenization; returns the lowest-CE model and all CE values.
pub fn min_ce_select(models: &[&TinyLM], instruction: &str, response: &str, norm: CeNormalization) -> Result<(usize, Vec<f64>)> {
    if models.is_empty() {
        return Err(Error::invalid("min_ce_select needs at least one model"));
    }
    let ces = models
        .iter()
        .map(|m| {
            let x = m.tokenizer().encode(instruction);
            let y = supervised_tokens(m, response);
            let ce = m.sequence_cross_entropy(&x, &y)?;
            Ok(match norm {
                CeNormalization::Sum => ce,
                CeNormalization::Mean => ce / y.len() as f64,
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((argmin_lowest(&ces), ces))
}

/// One source model's sampled response with the truncated distribution
/// captured at every emitted position.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Emitted tokens including the terminating EOS, when emitted.
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub rows: Vec<SparseDistribution>,
}

pub fn generate_candidates(
    models: &[&TinyLM],
    instruction: &str,
    params: &[DecodingParams],
    capture: &SparsifyParams,
) -> Result<Vec<Candidate>> {
    if params.len() != models.len() {
        return Err(Error::invalid("one set of decoding parameters per model"));
    }
    models
        .iter()
        .zip(params)
        .map(|(m, p)| {
            let x = m.tokenizer().encode(instruction);
            let g = m.generate_traced(&x, p)?;
            let rows = g
                .step_logits
                .iter()
                .map(|z| sparsify(z, capture.top_p, capture.top_k, capture.temperature))
                .collect::<Result<Vec<_>>>()?;
            Ok(Candidate {
                tokens: g.supervised_tokens(m.tokenizer().eos()),
                text: m.tokenizer().decode(&g.tokens),
                rows,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub winner: usize,
    pub votes: Vec<usize>,
    /// The candidate each scorer voted for, in scorer order.
    pub ballots: Vec<usize>,
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Plurality vote of reward scorers over candidate responses.
///
/// Each scorer votes for its top-scoring candidate (lowest index on its own
/// ties). Tied vote counts are settled by the raw scores of the scorer at
/// `strongest`; anything still tied goes to the lowest index.
pub fn rm_vote(
    candidates: &[&str],
    scorers: &[&dyn RewardScorer],
    ctx: &ScoreContext<'_>,
    strongest: Option<usize>,
) -> Result<VoteOutcome> {
    if candidates.is_empty() || scorers.is_empty() {
        return Err(Error::invalid("rm_vote needs at least one candidate and one scorer"));
    }
    if strongest.is_some_and(|s| s >= scorers.len()) {
        return Err(Error::invalid("strongest scorer index out of range"));
    }
    let mut votes = vec![0usize; candidates.len()];
    let mut ballots = Vec::with_capacity(scorers.len());
    let mut strongest_scores = None;
    for (si, s) in scorers.iter().enumerate() {
        let scores: Vec<f64> = candidates.iter().map(|c| s.score(ctx, c)).collect();
        let pick = argmax_lowest(&scores);
        votes[pick] += 1;
        ballots.push(pick);
        if Some(si) == strongest {
            strongest_scores = Some(scores);
        }
    }
    let top = *votes.iter().max().expect("non-empty");
    let tied: Vec<usize> = (0..candidates.len()).filter(|&i| votes[i] == top).collect();
    let winner = match (&tied[..], strongest_scores) {
        ([only], _) => *only,
        (many, Some(scores)) => {
            let mut best = many[0];
            for &i in &many[1..] {
                if scores[i] > scores[best] {
                    best = i;
                }
            }
            best
        }
        (many, None) => many[0],
    };
    Ok(VoteOutcome { winner, votes, ballots })
}

/// Snapshot address of a stored distribution sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotKey {
    pub example_id: String,
    pub model_id: String,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub example_id: String,
    pub train_winner: usize,
    pub train_winner_id: String,
    pub train_ce: Vec<f64>,
    pub infer_winner: usize,
    pub infer_winner_id: String,
    pub infer_votes: Vec<usize>,
    /// Winning generation in the winner's own tokenization, EOS included.
    pub infer_response: Vec<TokenId>,
    pub infer_text: String,
    pub train_rows: SnapshotKey,
    pub infer_rows: SnapshotKey,
}

/// Resolves both advantage modes for every example. Inference candidates
/// are the generations stored in `snapshots`.
pub fn build_advantage_records(
    dataset: &[Example],
    sources: &[SourceModel],
    scorers: &[&dyn RewardScorer],
    strongest: Option<usize>,
    snapshots: &SnapshotStore,
    norm: CeNormalization,
) -> Result<Vec<AdvantageRecord>> {
    let models: Vec<&TinyLM> = sources.iter().map(|s| &s.model).collect();
    dataset
        .iter()
        .map(|ex| {
            for s in sources {
                snapshots.require(&ex.id, &s.id, Mode::Train)?;
            }
            let infer: Vec<_> = sources
                .iter()
                .map(|s| snapshots.require(&ex.id, &s.id, Mode::Infer))
                .collect::<Result<_>>()?;
            let (train_winner, train_ce) = min_ce_select(&models, &ex.instruction, &ex.response, norm)?;
            let texts: Vec<String> = infer
                .iter()
                .zip(sources)
                .map(|(r, s)| s.model.tokenizer().decode(&r.response_token_ids))
                .collect();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let vote = rm_vote(&refs, scorers, &ex.score_context(), strongest)?;
            let key = |i: usize, mode| SnapshotKey {
                example_id: ex.id.clone(),
                model_id: sources[i].id.clone(),
                mode,
            };
            Ok(AdvantageRecord {
                example_id: ex.id.clone(),
                train_winner,
                train_winner_id: sources[train_winner].id.clone(),
                train_ce,
                infer_winner: vote.winner,
                infer_winner_id: sources[vote.winner].id.clone(),
                infer_votes: vote.votes,
                infer_response: infer[vote.winner].response_token_ids.clone(),
                infer_text: texts[vote.winner].clone(),
                train_rows: key(train_winner, Mode::Train),
                infer_rows: key(vote.winner, Mode::Infer),
            })
        })
        .collect()
}

/// JSONL advantage report, one record per line.
pub fn write_advantage_report(path: impl AsRef<Path>, records: &[AdvantageRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_advantage_report(path: impl AsRef<Path>) -> Result<Vec<AdvantageRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedLine {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
