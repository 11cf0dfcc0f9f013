//! Desk-scale knowledge fusion of small language models.
//!
//! Source models with complementary skills are distilled into a target
//! model. Per example, the best teacher is chosen either by teacher-forced
//! cross-entropy on the ground truth (training mode) or by a reward-scorer
//! vote over sampled generations (inference mode), and the target is
//! trained with `L_sft + β · KL` under a phase schedule that weights the two
//! modes.
//!
//! Modules, bottom up:
//! - [`tinylm`]: a fixed-window MLP language model with manual backprop
//! - [`corpus`]: datasets and synthetic tasks
//! - [`distillstore`]: truncated distributions and snapshot files
//! - [`align`]: cross-tokenizer projection of distributions
//! - [`advantage`]: min-CE selection and reward voting
//! - [`fuse`]: fusion losses and the phase schedule
//! - [`harness`]: experiments, strategies, reports

pub mod advantage;
pub mod align;
pub mod corpus;
pub mod distillstore;
pub mod error;
pub mod fuse;
pub mod harness;
pub mod tinylm;
pub mod util;

pub use error::{Error, Result};
