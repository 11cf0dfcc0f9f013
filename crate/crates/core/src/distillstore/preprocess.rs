use serde::{Deserialize, Serialize};

use super::{Mode, SnapshotRecord, SnapshotStore, SparsifyParams};
use crate::advantage::{generate_candidates, supervised_tokens, SourceModel};
use crate::corpus::Example;
use crate::error::Result;
use crate::tinylm::DecodingParams;
use crate::util::mix_seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub sparsify: SparsifyParams,
    /// Source-model sampling for inference mode. The seed is re-derived
    /// per (example, model) from `seed`.
    pub decoding: DecodingParams,
    pub modes: Vec<Mode>,
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            sparsify: SparsifyParams::default(),
            decoding: DecodingParams::sample(16, 0),
            modes: vec![Mode::Train, Mode::Infer],
            seed: 0,
        }
    }
}

/// Captures teacher distributions for every (example, source, mode):
/// teacher-forced rows over the ground truth in train mode, and one
/// sampled generation with its per-step rows in infer mode.
pub fn preprocess(dataset: &[Example], sources: &[SourceModel], cfg: &PreprocessConfig) -> Result<SnapshotStore> {
    let mut store = SnapshotStore::new();
    for (ei, ex) in dataset.iter().enumerate() {
        for (mi, src) in sources.iter().enumerate() {
            let m = &src.model;
            if cfg.modes.contains(&Mode::Train) {
                let x = m.tokenizer().encode(&ex.instruction);
                let y = supervised_tokens(m, &ex.response);
                let logits = m.teacher_forcing_logits(&x, &y)?;
                let rows = logits.iter_rows().map(|r| cfg.sparsify.apply(r)).collect::<Result<_>>()?;
                store.insert(SnapshotRecord {
                    example_id: ex.id.clone(),
                    model_id: src.id.clone(),
                    mode: Mode::Train,
                    response_token_ids: y,
                    rows,
                })?;
            }
            if cfg.modes.contains(&Mode::Infer) {
                let params = DecodingParams {
                    seed: mix_seeds(&[cfg.seed, ei as u64, mi as u64]),
                    ..cfg.decoding.clone()
                };
                let cand = generate_candidates(&[m], &ex.instruction, &[params], &cfg.sparsify)?
                    .pop()
                    .expect("one candidate per model");
                store.insert(SnapshotRecord {
                    example_id: ex.id.clone(),
                    model_id: src.id.clone(),
                    mode: Mode::Infer,
                    response_token_ids: cand.tokens,
                    rows: cand.rows,
                })?;
            }
        }
    }
    Ok(store)
}
