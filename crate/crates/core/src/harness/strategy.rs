use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{apply_batch, epoch_order, steps_per_epoch, TrainConfig};
use crate::corpus::DifficultyCriterion;
use crate::error::{Error, Result};
use crate::fuse::{phase_schedule, profuser_loss_accumulate, FusionConfig, FusionItem, Phase};
use crate::tinylm::{Params, Sgd, TinyLM};
use crate::util::mix_seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyName {
    #[serde(rename = "CSFT")]
    Csft,
    TrainFuse,
    SimulFuse,
    ReverseFuse,
    ProFuser,
    GTLenCurriculum,
    RMScoreCurriculum,
}

impl StrategyName {
    pub const ALL: [StrategyName; 7] = [
        StrategyName::Csft,
        StrategyName::TrainFuse,
        StrategyName::SimulFuse,
        StrategyName::ReverseFuse,
        StrategyName::ProFuser,
        StrategyName::GTLenCurriculum,
        StrategyName::RMScoreCurriculum,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::Csft => "CSFT",
            StrategyName::TrainFuse => "TrainFuse",
            StrategyName::SimulFuse => "SimulFuse",
            StrategyName::ReverseFuse => "ReverseFuse",
            StrategyName::ProFuser => "ProFuser",
            StrategyName::GTLenCurriculum => "GTLenCurriculum",
            StrategyName::RMScoreCurriculum => "RMScoreCurriculum",
        }
    }
}

impl fmt::Display for StrategyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = |x: &str| x.to_ascii_lowercase().replace(['-', '_'], "");
        StrategyName::ALL
            .into_iter()
            .find(|n| norm(n.as_str()) == norm(s))
            .ok_or_else(|| Error::invalid(format!("unknown strategy `{s}`")))
    }
}

/// A named training plan: per-epoch loss weights plus an optional
/// easy-to-hard data ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub name: StrategyName,
    pub fusion: FusionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curriculum: Option<DifficultyCriterion>,
}

impl StrategySpec {
    /// Derives the named plan from the progressive `base` schedule. Every
    /// baseline keeps the per-epoch KL weights of `base` so only the mode
    /// weighting (or data order) changes between strategies.
    pub fn from_base(name: StrategyName, base: &FusionConfig) -> Self {
        let map = |f: &dyn Fn(&Phase) -> Phase| FusionConfig {
            kl: base.kl,
            phases: base.phases.iter().map(f).collect(),
        };
        let fusion = match name {
            StrategyName::Csft => {
                let mut c = FusionConfig::single_phase(base.total_epochs(), 0.0, 1.0, 0.0);
                c.kl = base.kl;
                c
            }
            StrategyName::TrainFuse => map(&|p| Phase {
                w1: 0.0,
                w2: 1.0,
                ..p.clone()
            }),
            StrategyName::SimulFuse => map(&|p| Phase {
                w1: 0.1,
                w2: 1.0,
                ..p.clone()
            }),
            StrategyName::ReverseFuse => map(&|p| Phase {
                w1: p.w2,
                w2: p.w1,
                beta_infer: p.beta_train,
                beta_train: p.beta_infer,
                ..p.clone()
            }),
            StrategyName::ProFuser | StrategyName::GTLenCurriculum | StrategyName::RMScoreCurriculum => base.clone(),
        };
        let curriculum = match name {
            StrategyName::GTLenCurriculum => Some(DifficultyCriterion::GtLength),
            StrategyName::RMScoreCurriculum => Some(DifficultyCriterion::RmScore),
            _ => None,
        };
        Self { name, fusion, curriculum }
    }

    pub fn epochs(&self) -> usize {
        self.fusion.total_epochs()
    }
}

/// Per-example training material. Index `i` of every vector refers to the
/// same fusion example.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionData {
    pub example_ids: Vec<String>,
    pub infer: Vec<FusionItem>,
    pub train: Vec<FusionItem>,
}

impl FusionData {
    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::invalid("no fusion items"));
        }
        if self.infer.len() != self.train.len() || self.example_ids.len() != self.train.len() {
            return Err(Error::ShapeMismatch("fusion data vectors differ in length".into()));
        }
        Ok(())
    }
}

/// Easy indices first, then hard ones, each block shuffled per epoch.
pub fn curriculum_order(easy: &[usize], hard: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seeds(&[seed, epoch as u64, 0xC0]));
    let mut e = easy.to_vec();
    let mut h = hard.to_vec();
    e.shuffle(&mut rng);
    h.shuffle(&mut rng);
    e.extend(h);
    e
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    /// Mean loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Trains `model` in place with the strategy's epoch plan. `split` gives
/// the (easy, hard) index partition for curriculum strategies.
pub fn train_strategy(
    model: &mut TinyLM,
    spec: &StrategySpec,
    data: &FusionData,
    split: Option<(&[usize], &[usize])>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RunTrace> {
    spec.fusion.validate()?;
    data.validate()?;
    cfg.validate()?;
    if spec.curriculum.is_some() && split.is_none() {
        return Err(Error::invalid(format!("{} needs a difficulty split", spec.name)));
    }
    let epochs = spec.epochs();
    let mut opt = Sgd::new(cfg.momentum)?;
    let schedule = cfg.schedule(epochs * steps_per_epoch(data.len(), cfg.batch_size));
    let mut trace = RunTrace {
        step_losses: Vec::new(),
        epoch_losses: Vec::new(),
    };
    let mut step = 0;
    for epoch in 1..=epochs {
        let weights = phase_schedule(&spec.fusion, epoch)?;
        let order = match (spec.curriculum, split) {
            (Some(_), Some((easy, hard))) => curriculum_order(easy, hard, seed, epoch),
            _ => epoch_order(data.len(), seed, epoch),
        };
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Params::zeros_like(model.params());
            let mut loss = 0.0;
            for &i in batch {
                let terms = profuser_loss_accumulate(
                    model,
                    Some(&data.infer[i]),
                    Some(&data.train[i]),
                    &weights,
                    &spec.fusion.kl,
                    &mut grads,
                )?;
                loss += terms.loss;
            }
            let loss = loss / batch.len() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("{} loss at step {step}", spec.name)));
            }
            trace.step_losses.push(loss);
            epoch_sum += loss * batch.len() as f64;
            apply_batch(model, &mut opt, &mut grads, batch.len(), cfg, schedule.at(step))?;
            step += 1;
        }
        trace.epoch_losses.push(epoch_sum / data.len() as f64);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for n in StrategyName::ALL {
            assert_eq!(n.as_str().parse::<StrategyName>().unwrap(), n);
        }
        assert_eq!("reverse-fuse".parse::<StrategyName>().unwrap(), StrategyName::ReverseFuse);
        assert_eq!("csft".parse::<StrategyName>().unwrap(), StrategyName::Csft);
        assert!("nope".parse::<StrategyName>().is_err());
    }

    #[test]
    fn derived_schedules() {
        let base = FusionConfig::default();
        let at = |n, e| phase_schedule(&StrategySpec::from_base(n, &base).fusion, e).unwrap().as_tuple();
        for e in 1..=3 {
            assert_eq!(at(StrategyName::Csft, e), (0.0, 1.0, 0.0));
            assert_eq!(at(StrategyName::TrainFuse, e).0, 0.0);
            assert_eq!(at(StrategyName::SimulFuse, e).0, 0.1);
            assert_eq!(at(StrategyName::GTLenCurriculum, e), at(StrategyName::ProFuser, e));
        }
        assert_eq!(at(StrategyName::ReverseFuse, 1), (0.0, 1.0, 0.1));
        assert_eq!(at(StrategyName::ReverseFuse, 3), (1.0, 0.1, 0.5));
        assert_eq!(at(StrategyName::TrainFuse, 2), (0.0, 1.0, 0.5));
    }

    #[test]
    fn curriculum_puts_easy_first() {
        let o = curriculum_order(&[0, 2, 4], &[1, 3], 9, 1);
        let mut head = o[..3].to_vec();
        head.sort_unstable();
        assert_eq!(head, vec![0, 2, 4]);
    }
}
