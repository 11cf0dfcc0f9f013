use super::metrics::{reference_score, MetricUnit};
use crate::corpus::solve_instruction;
use crate::tinylm::TinyLM;

/// What a scorer may look at besides the response itself.
#[derive(Debug, Clone, Copy)]
pub struct ScoreContext<'a> {
    pub system: &'a str,
    pub instruction: &'a str,
    /// Ground-truth response, when known.
    pub reference: Option<&'a str>,
}

impl<'a> ScoreContext<'a> {
    pub fn new(instruction: &'a str) -> Self {
        Self {
            system: "",
            instruction,
            reference: None,
        }
    }
}

/// Assigns a quality score (higher is better) to a response. Must be
/// deterministic and finite.
pub trait RewardScorer: Send + Sync {
    fn id(&self) -> &str;

    fn descriptor(&self) -> &str {
        ""
    }

    fn score(&self, ctx: &ScoreContext<'_>, response: &str) -> f64;
}

/// 1 when the response solves the synthetic task, else 0, minus a small
/// per-character length penalty.
#[derive(Debug, Clone)]
pub struct TaskCorrectnessScorer {
    pub alphabet_size: usize,
    pub length_penalty: f64,
}

impl TaskCorrectnessScorer {
    pub fn new(alphabet_size: usize) -> Self {
        Self {
            alphabet_size,
            length_penalty: 1e-3,
        }
    }
}

impl RewardScorer for TaskCorrectnessScorer {
    fn id(&self) -> &str {
        "correctness"
    }

    fn descriptor(&self) -> &str {
        "exact task answer check with length penalty"
    }

    fn score(&self, ctx: &ScoreContext<'_>, response: &str) -> f64 {
        let correct = solve_instruction(ctx.instruction, self.alphabet_size).is_some_and(|a| a == response);
        f64::from(u8::from(correct)) - self.length_penalty * response.chars().count() as f64
    }
}

/// Combined reference score against the ground truth.
#[derive(Debug, Clone)]
pub struct ReferenceSimilarityScorer {
    pub embedder: TinyLM,
    pub unit: MetricUnit,
}

impl RewardScorer for ReferenceSimilarityScorer {
    fn id(&self) -> &str {
        "reference"
    }

    fn descriptor(&self) -> &str {
        "0.25 BLEU + 0.25 ROUGE-L + 0.5 embedding cosine vs ground truth"
    }

    fn score(&self, ctx: &ScoreContext<'_>, response: &str) -> f64 {
        match ctx.reference {
            Some(r) if !r.is_empty() => reference_score(response, r, &self.embedder, self.unit).combined,
            _ => 0.0,
        }
    }
}

/// Mean per-token log-likelihood of `response + EOS` under a model.
#[derive(Debug, Clone)]
pub struct LogLikelihoodScorer {
    pub model: TinyLM,
}

impl RewardScorer for LogLikelihoodScorer {
    fn id(&self) -> &str {
        "loglik"
    }

    fn descriptor(&self) -> &str {
        "mean token log-likelihood under the target model"
    }

    fn score(&self, ctx: &ScoreContext<'_>, response: &str) -> f64 {
        let tok = self.model.tokenizer();
        let x = tok.encode(ctx.instruction);
        let mut y = tok.encode(response);
        y.push(tok.eos());
        let n = y.len() as f64;
        self.model
            .sequence_cross_entropy(&x, &y)
            .map(|ce| -ce / n)
            .unwrap_or(f64::NEG_INFINITY)
    }
}

/// Wraps a closure; handy for constructed cases.
pub struct FnScorer<F> {
    id: String,
    f: F,
}

impl<F> FnScorer<F>
where
    F: Fn(&ScoreContext<'_>, &str) -> f64 + Send + Sync,
{
    pub fn new(id: impl Into<String>, f: F) -> Self {
        Self { id: id.into(), f }
    }
}

impl<F> RewardScorer for FnScorer<F>
where
    F: Fn(&ScoreContext<'_>, &str) -> f64 + Send + Sync,
{
    fn id(&self) -> &str {
        &self.id
    }

    fn score(&self, ctx: &ScoreContext<'_>, response: &str) -> f64 {
        (self.f)(ctx, response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::TokenizerSpec;

    #[test]
    fn correctness_prefers_right_answer_then_short() {
        let s = TaskCorrectnessScorer::new(5);
        let ctx = ScoreContext::new("REVERSE : abc");
        assert!(s.score(&ctx, "cba") > s.score(&ctx, "abc"));
        assert!(s.score(&ctx, "ab") > s.score(&ctx, "abcd"));
        assert!(s.score(&ScoreContext::new("free text"), "x") < 0.0);
    }

    #[test]
    fn loglik_of_uniform_model() {
        let tok = TokenizerSpec::char_level("ab").unwrap();
        let m = TinyLM::zeros(tok, 2, 1, 1).unwrap();
        let s = LogLikelihoodScorer { model: m };
        let v = s.score(&ScoreContext::new("a"), "ab");
        assert!((v + 6f64.ln()).abs() < 1e-12);
    }
}
