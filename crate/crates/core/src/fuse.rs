//! Fusion objectives and the progressive phase schedule.
//!
//! `L_fuse(x, y, P_S) = L_sft(x, y) + β · Σ_t KL(P_S,t ‖ P_T,t)` transfers a
//! teacher's per-position distributions into the target. The progressive
//! objective mixes an inference-mode item (a voted source generation with
//! its own distributions) and a training-mode item (ground truth with the
//! lowest-CE source's distributions): `w1 · L_infer + w2 · L_train`.

use serde::{Deserialize, Serialize};

use crate::distillstore::{ResidualPolicy, SparseDistribution};
use crate::error::{Error, Result};
use crate::tinylm::{cross_entropy_grad, cross_entropy_of, log_sum_exp, LogitsMatrix, Params, TinyLM, TokenId, Trace};

/// Floor applied to target probabilities before taking logs.
pub const TARGET_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KlSettings {
    pub temperature: f64,
    pub residual_policy: ResidualPolicy,
}

impl Default for KlSettings {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            residual_policy: ResidualPolicy::SingleBucket,
        }
    }
}

/// Weights for one contiguous range of epochs (1-based, inclusive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub first_epoch: usize,
    pub last_epoch: usize,
    pub w1: f64,
    pub w2: f64,
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_infer: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_train: Option<f64>,
}

impl Phase {
    pub fn new(first_epoch: usize, last_epoch: usize, w1: f64, w2: f64, beta: f64) -> Self {
        Self {
            first_epoch,
            last_epoch,
            w1,
            w2,
            beta,
            beta_infer: None,
            beta_train: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseWeights {
    pub w1: f64,
    pub w2: f64,
    pub beta: f64,
    pub beta_infer: f64,
    pub beta_train: f64,
}

impl PhaseWeights {
    pub fn as_tuple(&self) -> (f64, f64, f64) {
        (self.w1, self.w2, self.beta)
    }

    /// Same weights for both modes.
    pub fn uniform(w1: f64, w2: f64, beta: f64) -> Self {
        Self {
            w1,
            w2,
            beta,
            beta_infer: beta,
            beta_train: beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    #[serde(default)]
    pub kl: KlSettings,
    pub phases: Vec<Phase>,
}

impl Default for FusionConfig {
    /// One inference-mode epoch (w1 = 1, w2 = 0, β = 0.1) followed by two
    /// co-fusion epochs (w1 = 0.1, w2 = 1, β = 0.5).
    fn default() -> Self {
        Self {
            kl: KlSettings::default(),
            phases: vec![Phase::new(1, 1, 1.0, 0.0, 0.1), Phase::new(2, 3, 0.1, 1.0, 0.5)],
        }
    }
}

impl FusionConfig {
    pub fn single_phase(epochs: usize, w1: f64, w2: f64, beta: f64) -> Self {
        Self {
            kl: KlSettings::default(),
            phases: vec![Phase::new(1, epochs, w1, w2, beta)],
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.last_epoch).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kl.temperature > 0.0) {
            return Err(Error::invalid("kl temperature must be positive"));
        }
        if self.phases.is_empty() {
            return Err(Error::invalid("at least one phase required"));
        }
        for p in &self.phases {
            let weights = [Some(p.w1), Some(p.w2), Some(p.beta), p.beta_infer, p.beta_train];
            if weights.iter().flatten().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(Error::invalid("phase weights must be finite and nonnegative"));
            }
            if !(p.w1 + p.w2 > 0.0) {
                return Err(Error::invalid("every phase needs w1 + w2 > 0"));
            }
            if p.first_epoch == 0 || p.first_epoch > p.last_epoch {
                return Err(Error::invalid("phase epochs must satisfy 1 <= first <= last"));
            }
        }
        Ok(())
    }
}

/// Weights in force at a 1-based `epoch`.
pub fn phase_schedule(config: &FusionConfig, epoch: usize) -> Result<PhaseWeights> {
    let p = config
        .phases
        .iter()
        .find(|p| (p.first_epoch..=p.last_epoch).contains(&epoch))
        .ok_or(Error::EpochOutOfSchedule(epoch))?;
    Ok(PhaseWeights {
        w1: p.w1,
        w2: p.w2,
        beta: p.beta,
        beta_infer: p.beta_infer.unwrap_or(p.beta),
        beta_train: p.beta_train.unwrap_or(p.beta),
    })
}

/// Supervision sequence plus one teacher row per position, already in the
/// target vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionItem {
    pub x: Vec<TokenId>,
    pub y: Vec<TokenId>,
    pub teacher_rows: Vec<SparseDistribution>,
}

impl FusionItem {
    pub fn validate(&self) -> Result<()> {
        if self.y.is_empty() {
            return Err(Error::invalid("fusion item has an empty response"));
        }
        if self.teacher_rows.len() != self.y.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} teacher rows for {} response tokens",
                self.teacher_rows.len(),
                self.y.len()
            )));
        }
        Ok(())
    }
}

/// Forward KL from a teacher row to the target softmax at the given
/// temperature, with its gradient w.r.t. the raw target logits.
pub fn kl_divergence_with_grad(
    teacher: &SparseDistribution,
    target_logits: &[f64],
    settings: &KlSettings,
) -> Result<(f64, Vec<f64>)> {
    let v = target_logits.len();
    if let Some(&bad) = teacher.token_ids().iter().find(|&&id| id as usize >= v) {
        return Err(Error::invalid(format!("teacher id {bad} outside target vocabulary of {v}")));
    }
    if target_logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("target logits".into()));
    }
    let tau = settings.temperature;
    let scaled: Vec<f64> = target_logits.iter().map(|z| z / tau).collect();
    let lse = log_sum_exp(&scaled);
    let log_floor = TARGET_PROB_FLOOR.ln();
    let q: Vec<f64> = scaled.iter().map(|s| (s - lse).exp()).collect();

    let mut kept = vec![false; v];
    teacher.token_ids().iter().for_each(|&id| kept[id as usize] = true);

    // coefficient on q_j collected from unfloored terms
    let mut mass_unfloored = 0.0;
    let mut kl = 0.0;
    let mut grad = vec![0.0; v];

    for (id, p) in teacher.iter() {
        let lq = scaled[id as usize] - lse;
        if lq > log_floor {
            kl += p * (p.ln() - lq);
            mass_unfloored += p;
            grad[id as usize] -= p;
        } else {
            kl += p * (p.ln() - log_floor);
        }
    }

    let r = teacher.residual();
    let rest: Vec<usize> = (0..v).filter(|&j| !kept[j]).collect();
    match settings.residual_policy {
        ResidualPolicy::SingleBucket => {
            if r > 0.0 {
                let lq_b = if rest.is_empty() {
                    f64::NEG_INFINITY
                } else {
                    let zs: Vec<f64> = rest.iter().map(|&j| scaled[j]).collect();
                    log_sum_exp(&zs) - lse
                };
                if lq_b > log_floor {
                    kl += r * (r.ln() - lq_b);
                    mass_unfloored += r;
                    let lse_rest = lq_b + lse;
                    for &j in &rest {
                        grad[j] -= r * (scaled[j] - lse_rest).exp();
                    }
                } else {
                    kl += r * (r.ln() - log_floor);
                }
            }
        }
        ResidualPolicy::UniformOverRest => {
            if r > 0.0 && !rest.is_empty() {
                let share = r / rest.len() as f64;
                for &j in &rest {
                    let lq = scaled[j] - lse;
                    if lq > log_floor {
                        kl += share * (share.ln() - lq);
                        mass_unfloored += share;
                        grad[j] -= share;
                    } else {
                        kl += share * (share.ln() - log_floor);
                    }
                }
            }
        }
    }
    for (g, qj) in grad.iter_mut().zip(&q) {
        *g = (*g + mass_unfloored * qj) / tau;
    }
    Ok((kl.max(0.0), grad))
}

pub fn kl_divergence(teacher: &SparseDistribution, target_logits: &[f64], settings: &KlSettings) -> Result<f64> {
    kl_divergence_with_grad(teacher, target_logits, settings).map(|(kl, _)| kl)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub loss: f64,
    pub sft: f64,
    pub kl: f64,
}

/// Loss, upstream gradient w.r.t. the teacher-forced logits, and the
/// forward trace for backprop.
pub fn fusion_loss_traced(
    model: &TinyLM,
    item: &FusionItem,
    beta: f64,
    settings: &KlSettings,
) -> Result<(LossTerms, LogitsMatrix, Trace)> {
    item.validate()?;
    let trace = model.trace(&item.x, &item.y)?;
    let sft = cross_entropy_of(&trace.logits, &item.y);
    let mut upstream = cross_entropy_grad(&trace.logits, &item.y);
    let mut kl = 0.0;
    for (t, row) in item.teacher_rows.iter().enumerate() {
        let (k, g) = kl_divergence_with_grad(row, trace.logits.row(t), settings)?;
        kl += k;
        if beta != 0.0 {
            for (u, gk) in upstream.row_mut(t).iter_mut().zip(g) {
                *u += beta * gk;
            }
        }
    }
    let terms = LossTerms {
        loss: if beta == 0.0 { sft } else { sft + beta * kl },
        sft,
        kl,
    };
    Ok((terms, upstream, trace))
}

/// `L_sft + β · Σ_t KL_t` and its gradient w.r.t. the target logits.
pub fn fusion_loss(model: &TinyLM, item: &FusionItem, beta: f64, settings: &KlSettings) -> Result<(f64, LogitsMatrix)> {
    let (terms, upstream, _) = fusion_loss_traced(model, item, beta, settings)?;
    Ok((terms.loss, upstream))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfuserTerms {
    pub loss: f64,
    pub infer: Option<LossTerms>,
    pub train: Option<LossTerms>,
}

/// `w1 · L_infer + w2 · L_train`, accumulating parameter gradients into
/// `grads`. Terms whose weight is zero are skipped, so their item may be
/// absent.
pub fn profuser_loss_accumulate(
    model: &TinyLM,
    infer_item: Option<&FusionItem>,
    train_item: Option<&FusionItem>,
    weights: &PhaseWeights,
    settings: &KlSettings,
    grads: &mut Params,
) -> Result<ProfuserTerms> {
    if infer_item.is_none() && train_item.is_none() {
        return Err(Error::invalid("profuser loss needs at least one item"));
    }
    if !(weights.w1 + weights.w2 > 0.0) {
        return Err(Error::invalid("at least one of w1, w2 must be positive"));
    }
    let mut out = ProfuserTerms::default();
    let parts = [
        (weights.w1, infer_item, weights.beta_infer, "inference"),
        (weights.w2, train_item, weights.beta_train, "training"),
    ];
    for (i, (w, item, beta, name)) in parts.into_iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let item = item.ok_or_else(|| Error::invalid(format!("{name}-mode weight is {w} but its item is absent")))?;
        let (terms, mut upstream, trace) = fusion_loss_traced(model, item, beta, settings)?;
        if w != 1.0 {
            for t in 0..upstream.rows() {
                upstream.row_mut(t).iter_mut().for_each(|u| *u *= w);
            }
        }
        model.accumulate_backward(&trace, &upstream, grads)?;
        out.loss += w * terms.loss;
        if i == 0 {
            out.infer = Some(terms);
        } else {
            out.train = Some(terms);
        }
    }
    Ok(out)
}

/// Progressive objective value and its parameter gradients.
pub fn profuser_loss(
    model: &TinyLM,
    infer_item: Option<&FusionItem>,
    train_item: Option<&FusionItem>,
    weights: &PhaseWeights,
    settings: &KlSettings,
) -> Result<(f64, Params)> {
    let mut grads = Params::zeros_like(model.params());
    let terms = profuser_loss_accumulate(model, infer_item, train_item, weights, settings, &mut grads)?;
    Ok((terms.loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distillstore::sparsify;
    use crate::tinylm::{softmax, TokenizerSpec};

    #[test]
    fn default_schedule() {
        let c = FusionConfig::default();
        c.validate().unwrap();
        assert_eq!(phase_schedule(&c, 1).unwrap().as_tuple(), (1.0, 0.0, 0.1));
        assert_eq!(phase_schedule(&c, 2).unwrap().as_tuple(), (0.1, 1.0, 0.5));
        assert_eq!(phase_schedule(&c, 3).unwrap().as_tuple(), (0.1, 1.0, 0.5));
        assert!(matches!(phase_schedule(&c, 4), Err(Error::EpochOutOfSchedule(4))));
        assert!(phase_schedule(&c, 0).is_err());
    }

    #[test]
    fn single_phase_is_constant() {
        let c = FusionConfig::single_phase(5, 0.0, 1.0, 0.5);
        for e in 1..=5 {
            assert_eq!(phase_schedule(&c, e).unwrap().as_tuple(), (0.0, 1.0, 0.5));
        }
    }

    #[test]
    fn per_mode_beta_overrides() {
        let mut c = FusionConfig::default();
        c.phases[1].beta_infer = Some(0.2);
        let w = phase_schedule(&c, 2).unwrap();
        assert_eq!((w.beta_infer, w.beta_train), (0.2, 0.5));
    }

    #[test]
    fn invalid_configs() {
        let mut c = FusionConfig::single_phase(1, 0.0, 0.0, 0.1);
        assert!(c.validate().is_err());
        c.phases[0].w2 = 1.0;
        c.phases[0].beta = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kl_hand_value() {
        // teacher (1, 0) vs target (0.5, 0.5)
        let teacher = SparseDistribution::one_hot(0);
        let kl = kl_divergence(&teacher, &[0.0, 0.0], &KlSettings::default()).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let logits = [0.3, -1.2, 2.0, 0.1];
        for policy in [ResidualPolicy::SingleBucket, ResidualPolicy::UniformOverRest] {
            let s = KlSettings {
                temperature: 1.0,
                residual_policy: policy,
            };
            let teacher = sparsify(&logits, 1.0, 4, 1.0).unwrap();
            assert!(kl_divergence(&teacher, &logits, &s).unwrap().abs() < 1e-12);
            // truncated teacher whose residual matches the target's tail mass
            let teacher = sparsify(&logits, 0.5, 2, 1.0).unwrap();
            if policy == ResidualPolicy::SingleBucket {
                assert!(kl_divergence(&teacher, &logits, &s).unwrap().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_gradient_is_zero_at_match() {
        let logits = [0.3, -1.2, 2.0, 0.1];
        let teacher = sparsify(&logits, 0.6, 2, 1.0).unwrap();
        let (_, g) = kl_divergence_with_grad(&teacher, &logits, &KlSettings::default()).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-12));
        let p = softmax(&logits);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn teacher_outside_vocab_errors() {
        let teacher = SparseDistribution::one_hot(9);
        assert!(kl_divergence(&teacher, &[0.0, 0.0], &KlSettings::default()).is_err());
    }

    fn small_model() -> TinyLM {
        TinyLM::new(TokenizerSpec::char_level("abc").unwrap(), 3, 2, 4, 3).unwrap()
    }

    #[test]
    fn beta_zero_reduces_to_sft() {
        let m = small_model();
        let item = FusionItem {
            x: vec![4, 5],
            y: vec![6, 1],
            teacher_rows: vec![SparseDistribution::one_hot(4), SparseDistribution::one_hot(5)],
        };
        let (loss, up) = fusion_loss(&m, &item, 0.0, &KlSettings::default()).unwrap();
        assert_eq!(loss, m.sequence_cross_entropy(&item.x, &item.y).unwrap());
        let logits = m.teacher_forcing_logits(&item.x, &item.y).unwrap();
        assert_eq!(up, cross_entropy_grad(&logits, &item.y));
    }

    #[test]
    fn profuser_needs_an_item() {
        let m = small_model();
        let w = PhaseWeights::uniform(1.0, 0.0, 0.1);
        assert!(profuser_loss(&m, None, None, &w, &KlSettings::default()).is_err());
        let item = FusionItem {
            x: vec![4],
            y: vec![5],
            teacher_rows: vec![SparseDistribution::one_hot(5)],
        };
        // inference weight set but only a training item supplied
        assert!(profuser_loss(&m, None, Some(&item), &w, &KlSettings::default()).is_err());
        assert!(profuser_loss(&m, Some(&item), None, &w, &KlSettings::default()).is_ok());
    }

    #[test]
    fn mismatched_rows_rejected() {
        let m = small_model();
        let item = FusionItem {
            x: vec![4],
            y: vec![5, 6],
            teacher_rows: vec![SparseDistribution::one_hot(5)],
        };
        assert!(fusion_loss(&m, &item, 0.5, &KlSettings::default()).is_err());
    }
}
