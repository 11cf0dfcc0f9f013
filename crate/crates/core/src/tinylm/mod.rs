//! A small differentiable language model used for every source and
//! target in the fusion experiments.

mod checkpoint;
mod decoding;
mod model;
mod optim;
mod tokenizer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use decoding::{DecodingMode, DecodingParams, Generation};
pub use model::{
    cross_entropy_grad, cross_entropy_of, log_softmax, log_sum_exp, softmax, LogitsMatrix, Params, TinyLM, Trace,
};
pub use optim::{clip_grad_norm, sgd_step, LrSchedule, Sgd};
pub use tokenizer::{SpecialTokens, TokenId, TokenizerKind, TokenizerSpec, BOS, EOS, PAD, UNK, UNK_TEXT};
