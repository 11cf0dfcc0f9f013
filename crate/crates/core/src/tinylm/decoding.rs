use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::TinyLM;
use super::tokenizer::TokenId;
use crate::distillstore::sparsify;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodingMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodingParams {
    pub mode: DecodingMode,
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            mode: DecodingMode::Sample,
            temperature: 1.0,
            top_k: None,
            top_p: None,
            max_new_tokens: 32,
            seed: 0,
        }
    }
}

impl DecodingParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            mode: DecodingMode::Greedy,
            max_new_tokens,
            ..Self::default()
        }
    }

    pub fn sample(max_new_tokens: usize, seed: u64) -> Self {
        Self {
            max_new_tokens,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::invalid("top_p must lie in (0, 1]"));
            }
        }
        if self.top_k == Some(0) {
            return Err(Error::invalid("top_k must be positive"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::invalid("max_new_tokens must be positive"));
        }
        Ok(())
    }
}

/// Output of one decoding run. `tokens` excludes the EOS token;
/// `step_logits[i]` are the raw logits that produced the i-th emitted
/// token (including a terminating EOS when one was emitted).
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub stopped_on_eos: bool,
    pub step_logits: Vec<Vec<f64>>,
}

impl Generation {
    /// Emitted sequence including the terminating EOS, if any.
    pub fn supervised_tokens(&self, eos: TokenId) -> Vec<TokenId> {
        let mut t = self.tokens.clone();
        if self.stopped_on_eos {
            t.push(eos);
        }
        t
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl TinyLM {
    /// Autoregressive decoding until EOS or `max_new_tokens`.
    pub fn generate(&self, x: &[TokenId], params: &DecodingParams) -> Vec<TokenId> {
        self.generate_traced(x, params)
            .expect("decoding parameters validated by caller")
            .tokens
    }

    pub fn generate_traced(&self, x: &[TokenId], params: &DecodingParams) -> Result<Generation> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut seq = Vec::with_capacity(1 + x.len() + params.max_new_tokens);
        seq.push(self.tokenizer().bos());
        seq.extend_from_slice(x);
        let eos = self.tokenizer().eos();
        let mut out = Generation {
            tokens: Vec::new(),
            stopped_on_eos: false,
            step_logits: Vec::new(),
        };
        for _ in 0..params.max_new_tokens {
            let logits = self.forward_logits(&self.context_for(&seq))?;
            let next = match params.mode {
                DecodingMode::Greedy => argmax(&logits) as TokenId,
                DecodingMode::Sample => {
                    let top_k = params.top_k.unwrap_or(logits.len());
                    let top_p = params.top_p.unwrap_or(1.0);
                    let d = sparsify(&logits, top_p, top_k, params.temperature)?;
                    let u = rng.gen::<f64>() * d.kept_mass();
                    let mut acc = 0.0;
                    let mut pick = d.token_ids()[d.len() - 1];
                    for (id, p) in d.iter() {
                        acc += p;
                        if u < acc {
                            pick = id;
                            break;
                        }
                    }
                    pick
                }
            };
            out.step_logits.push(logits);
            if next == eos {
                out.stopped_on_eos = true;
                break;
            }
            out.tokens.push(next);
            seq.push(next);
        }
        Ok(out)
    }
}
