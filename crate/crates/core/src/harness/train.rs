use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::{supervised_tokens, SourceModel};
use crate::corpus::{synthesize_mixture, Example, TaskKind};
use crate::error::{Error, Result};
use crate::tinylm::{clip_grad_norm, cross_entropy_grad, cross_entropy_of, LrSchedule, Params, Sgd, TinyLM, TokenId, TokenizerKind, TokenizerSpec};
use crate::util::mix_seeds;

/// Optimizer settings shared by every training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(default)]
    pub cosine_decay: bool,
    #[serde(default)]
    pub min_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            cosine_decay: false,
            min_lr: 0.0,
            momentum: 0.9,
            batch_size: 16,
            clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self, total_steps: usize) -> LrSchedule {
        if self.cosine_decay {
            LrSchedule::Cosine {
                lr: self.lr,
                min_lr: self.min_lr,
                total_steps,
            }
        } else {
            LrSchedule::Constant { lr: self.lr }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::invalid("batch_size, lr and clip_norm must be positive"));
        }
        Ok(())
    }
}

/// Visiting order for one epoch: a seeded shuffle of `0..n`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seeds(&[seed, epoch as u64]));
    order.shuffle(&mut rng);
    order
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Averages a summed batch gradient, clips it, and applies one step.
pub(crate) fn apply_batch(
    model: &mut TinyLM,
    opt: &mut Sgd,
    grads: &mut Params,
    batch_len: usize,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    grads.scale(1.0 / batch_len as f64);
    clip_grad_norm(grads, cfg.clip_norm);
    opt.step(model, grads, lr)
}

/// Supervised fine-tuning on token pairs. Returns the mean loss of every
/// optimizer step.
pub fn sft_train(
    model: &mut TinyLM,
    data: &[(Vec<TokenId>, Vec<TokenId>)],
    epochs: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut opt = Sgd::new(cfg.momentum)?;
    let schedule = cfg.schedule(epochs * steps_per_epoch(data.len(), cfg.batch_size));
    let mut losses = Vec::new();
    let mut step = 0;
    for epoch in 1..=epochs {
        let order = epoch_order(data.len(), seed, epoch);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Params::zeros_like(model.params());
            let mut loss = 0.0;
            for &i in batch {
                let (x, y) = &data[i];
                let trace = model.trace(x, y)?;
                loss += cross_entropy_of(&trace.logits, y);
                let up = cross_entropy_grad(&trace.logits, y);
                model.accumulate_backward(&trace, &up, &mut grads)?;
            }
            let loss = loss / batch.len() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {step}")));
            }
            losses.push(loss);
            apply_batch(model, &mut opt, &mut grads, batch.len(), cfg, schedule.at(step))?;
            step += 1;
        }
    }
    Ok(losses)
}

/// Encodes examples as `(instruction, response + EOS)` token pairs.
pub fn encode_examples(model: &TinyLM, examples: &[Example]) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    examples
        .iter()
        .map(|e| (model.tokenizer().encode(&e.instruction), supervised_tokens(model, &e.response)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            window: 20,
            embed_dim: 8,
            hidden_dim: 64,
        }
    }
}

/// One source model: its tokenizer, the task mixture it is trained on, and
/// its training budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub id: String,
    pub tokenizer: TokenizerKind,
    pub mixture: Vec<(TaskKind, f64)>,
    pub n_train: usize,
    pub epochs: usize,
    #[serde(default)]
    pub dims: ModelDims,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskShape {
    pub alphabet_size: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for TaskShape {
    fn default() -> Self {
        Self {
            alphabet_size: 5,
            min_len: 1,
            max_len: 3,
        }
    }
}

/// SFT-trains each source on its own task mixture. Deterministic in `seed`.
pub fn train_source_models(specs: &[SourceSpec], shape: &TaskShape, seed: u64) -> Result<Vec<SourceModel>> {
    if specs.is_empty() {
        return Err(Error::invalid("at least one source spec required"));
    }
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let s = mix_seeds(&[seed, 0x50_55_52, i as u64, spec.seed_offset]);
            let tok = TokenizerSpec::for_tasks(spec.tokenizer, shape.alphabet_size)?;
            let d = &spec.dims;
            let mut model = TinyLM::new(tok, d.window, d.embed_dim, d.hidden_dim, s)?;
            let data = synthesize_mixture(
                &spec.mixture,
                shape.alphabet_size,
                shape.min_len,
                shape.max_len,
                spec.n_train,
                mix_seeds(&[s, 1]),
                &spec.id,
            )?;
            let pairs = encode_examples(&model, &data);
            sft_train(&mut model, &pairs, spec.epochs, &spec.train, mix_seeds(&[s, 2]))?;
            Ok(SourceModel::new(spec.id.clone(), model))
        })
        .collect()
}
