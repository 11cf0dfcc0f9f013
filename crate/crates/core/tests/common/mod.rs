//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use fusion_lab::distillstore::{sparsify, SparseDistribution};
use fusion_lab::fuse::FusionItem;
use fusion_lab::harness::{ExperimentConfig, ModelDims};
use fusion_lab::tinylm::{TinyLM, TokenId, TokenizerKind, TokenizerSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A small model with random shape and weights.
pub fn random_model(r: &mut ChaCha8Rng) -> TinyLM {
    let kind = if r.gen_bool(0.5) { TokenizerKind::Char } else { TokenizerKind::GreedyMerge };
    let tok = TokenizerSpec::for_tasks(kind, 3).unwrap();
    let mut m = TinyLM::new(tok, r.gen_range(2..7), r.gen_range(2..5), r.gen_range(3..9), r.gen()).unwrap();
    // larger weights than the default init so the checks see curvature
    let p = m.params_mut();
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += r.gen_range(-0.5..0.5);
        }
    }
    m
}

pub fn random_tokens(r: &mut ChaCha8Rng, vocab: usize, lo: usize, hi: usize) -> Vec<TokenId> {
    (0..r.gen_range(lo..=hi)).map(|_| r.gen_range(0..vocab) as TokenId).collect()
}

pub fn random_logits(r: &mut ChaCha8Rng, v: usize, scale: f64) -> Vec<f64> {
    (0..v).map(|_| r.gen_range(-scale..scale)).collect()
}

pub fn random_sparse(r: &mut ChaCha8Rng, v: usize) -> SparseDistribution {
    let z = random_logits(r, v, 4.0);
    sparsify(&z, r.gen_range(0.3..=1.0), r.gen_range(1..=v), r.gen_range(0.5..3.0)).unwrap()
}

pub fn random_item(r: &mut ChaCha8Rng, model: &TinyLM) -> FusionItem {
    let v = model.vocab_size();
    let x = random_tokens(r, v, 0, 6);
    let y = random_tokens(r, v, 1, 5);
    let teacher_rows = y.iter().map(|_| random_sparse(r, v)).collect();
    FusionItem { x, y, teacher_rows }
}

/// Largest relative error between `analytic` and central differences of
/// `f` over every parameter. Components where both values are below
/// `floor` in magnitude are compared against `floor`.
pub fn max_fd_rel_error(model: &TinyLM, analytic: &[f64], eps: f64, floor: f64, f: impl Fn(&TinyLM) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut m = model.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let v = model.params().get_flat(i);
        m.params_mut().set_flat(i, v + eps);
        let up = f(&m);
        m.params_mut().set_flat(i, v - eps);
        let down = f(&m);
        m.params_mut().set_flat(i, v);
        let n = (up - down) / (2.0 * eps);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
    z.iter().map(|v| v - m - s.ln()).collect()
}

/// Teacher-forced cross-entropy computed position by position from the
/// model's single-context forward pass.
pub fn oracle_sequence_ce(model: &TinyLM, x: &[TokenId], y: &[TokenId]) -> f64 {
    let mut prefix: Vec<TokenId> = vec![model.tokenizer().bos()];
    prefix.extend_from_slice(x);
    let mut total = 0.0;
    for &t in y {
        let ctx = model.context_for(&prefix);
        let z = model.forward_logits(&ctx).unwrap();
        total -= log_softmax(&z)[t as usize];
        prefix.push(t);
    }
    total
}

/// KL from a sparse teacher (kept ids plus one residual outcome) to the
/// softmax of `logits`, where the target's residual outcome is the total
/// probability of the ids the teacher did not keep. Target probabilities
/// are floored at 1e-12.
pub fn oracle_kl(teacher: &SparseDistribution, logits: &[f64]) -> f64 {
    let lq = log_softmax(logits);
    let floor = 1e-12f64;
    let mut kl = 0.0;
    for (id, p) in teacher.iter() {
        kl += p * (p.ln() - lq[id as usize].max(floor.ln()));
    }
    let r = teacher.residual();
    if r > 0.0 {
        let rest: f64 = (0..logits.len())
            .filter(|&j| teacher.prob_of(j as TokenId).is_none())
            .map(|j| lq[j].exp())
            .sum();
        kl += r * (r.ln() - rest.max(floor).ln());
    }
    kl
}

/// First index attaining the minimum.
pub fn brute_force_argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 0..v.len() {
        if v[i] < v[best] {
            best = i;
        }
    }
    best
}

/// A config that runs a whole seed in about a second.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    for s in &mut c.sources {
        s.n_train = 150;
        s.epochs = 4;
        s.dims = ModelDims {
            window: 12,
            embed_dim: 4,
            hidden_dim: 16,
        };
    }
    c.n_fusion = 48;
    c.n_eval_per_task = 12;
    c
}
