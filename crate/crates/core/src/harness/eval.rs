use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::advantage::supervised_tokens;
use crate::corpus::{parse_instruction, synthesize_mixture, Example, TaskKind};
use crate::error::{Error, Result};
use crate::tinylm::{DecodingParams, TinyLM};

/// Held-out examples grouped by task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSuite {
    pub tasks: BTreeMap<TaskKind, Vec<Example>>,
}

impl EvalSuite {
    pub fn synthesize(tasks: &[TaskKind], alphabet_size: usize, min_len: usize, max_len: usize, n_per_task: usize, seed: u64) -> Result<Self> {
        let mut out = BTreeMap::new();
        for &t in tasks {
            let ex = synthesize_mixture(&[(t, 1.0)], alphabet_size, min_len, max_len, n_per_task, seed, "eval")?;
            out.insert(t, ex);
        }
        Ok(Self { tasks: out })
    }

    /// Groups an arbitrary dataset by the task named in each instruction.
    pub fn from_examples(examples: &[Example]) -> Result<Self> {
        let mut out: BTreeMap<TaskKind, Vec<Example>> = BTreeMap::new();
        for e in examples {
            let (kind, _) = parse_instruction(&e.instruction)
                .ok_or_else(|| Error::invalid(format!("example {} has no task prefix", e.id)))?;
            out.entry(kind).or_default().push(e.clone());
        }
        Ok(Self { tasks: out })
    }

    pub fn len(&self) -> usize {
        self.tasks.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Greedy exact-match accuracy per task.
    pub per_task: BTreeMap<String, f64>,
    pub macro_average: f64,
    /// `exp` of the mean per-token cross-entropy on ground-truth responses.
    pub perplexity: f64,
}

/// Greedy exact match per task plus held-out perplexity.
pub fn evaluate(model: &TinyLM, suite: &EvalSuite, max_new_tokens: usize) -> Result<EvalMetrics> {
    if suite.is_empty() {
        return Err(Error::invalid("empty evaluation suite"));
    }
    let params = DecodingParams::greedy(max_new_tokens);
    let tok = model.tokenizer();
    let mut per_task = BTreeMap::new();
    let (mut ce_sum, mut n_tokens) = (0.0, 0usize);
    for (kind, examples) in &suite.tasks {
        let mut correct = 0usize;
        for e in examples {
            let x = tok.encode(&e.instruction);
            let out = model.generate(&x, &params);
            if tok.decode(&out) == e.response {
                correct += 1;
            }
            let y = supervised_tokens(model, &e.response);
            ce_sum += model.sequence_cross_entropy(&x, &y)?;
            n_tokens += y.len();
        }
        per_task.insert(kind.name().to_string(), correct as f64 / examples.len().max(1) as f64);
    }
    let macro_average = per_task.values().sum::<f64>() / per_task.len() as f64;
    Ok(EvalMetrics {
        per_task,
        macro_average,
        perplexity: (ce_sum / n_tokens as f64).exp(),
    })
}
