//! Fixed-window embedding-concat MLP language model with manual
//! backpropagation.
//!
//! The context of `W` token ids is embedded, concatenated, passed through a
//! single tanh hidden layer, and projected onto the vocabulary:
//!
//! ```text
//! input  = [E[c_0] | E[c_1] | ... | E[c_{W-1}]]         (W * d_e)
//! hidden = tanh(input · W_h + b_h)                       (d_h)
//! logits = hidden · W_o + b_o                            (V)
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{TokenId, TokenizerSpec};
use crate::error::{Error, Result};

/// Parameter tensors, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// `V x d_e`
    pub embed: Vec<f64>,
    /// `(W * d_e) x d_h`
    pub w_hidden: Vec<f64>,
    /// `d_h`
    pub b_hidden: Vec<f64>,
    /// `d_h x V`
    pub w_out: Vec<f64>,
    /// `V`
    pub b_out: Vec<f64>,
}

impl Params {
    pub fn zeros(vocab: usize, window: usize, embed_dim: usize, hidden_dim: usize) -> Self {
        Self {
            embed: vec![0.0; vocab * embed_dim],
            w_hidden: vec![0.0; window * embed_dim * hidden_dim],
            b_hidden: vec![0.0; hidden_dim],
            w_out: vec![0.0; hidden_dim * vocab],
            b_out: vec![0.0; vocab],
        }
    }

    pub fn zeros_like(other: &Params) -> Self {
        Self {
            embed: vec![0.0; other.embed.len()],
            w_hidden: vec![0.0; other.w_hidden.len()],
            b_hidden: vec![0.0; other.b_hidden.len()],
            w_out: vec![0.0; other.w_out.len()],
            b_out: vec![0.0; other.b_out.len()],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 5] {
        [&self.embed, &self.w_hidden, &self.b_hidden, &self.w_out, &self.b_out]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.embed,
            &mut self.w_hidden,
            &mut self.b_hidden,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .all(|(a, b)| a.len() == b.len())
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn get_flat(&self, mut index: usize) -> f64 {
        for t in self.tensors() {
            if index < t.len() {
                return t[index];
            }
            index -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for t in self.tensors_mut() {
            if index < t.len() {
                t[index] = value;
                return;
            }
            index -= t.len();
        }
        panic!("flat parameter index out of range");
    }
}

/// Row-major `rows x cols` matrix of real values, one row per response
/// position.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl LogitsMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| z - lse).collect()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyLM {
    tokenizer: TokenizerSpec,
    window: usize,
    embed_dim: usize,
    hidden_dim: usize,
    seed: u64,
    params: Params,
}

/// Cached activations of one teacher-forced pass, reused by backprop.
#[derive(Debug, Clone)]
pub struct Trace {
    pub logits: LogitsMatrix,
    contexts: Vec<Vec<TokenId>>,
    hidden: Vec<Vec<f64>>,
}

impl TinyLM {
    /// Randomly initialized model (uniform Glorot for the dense layers,
    /// `U(-0.5, 0.5)` embeddings, zero biases).
    pub fn new(tokenizer: TokenizerSpec, window: usize, embed_dim: usize, hidden_dim: usize, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(tokenizer, window, embed_dim, hidden_dim)?;
        m.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = m.vocab_size();
        let fan_in = window * embed_dim;
        let lim_h = (6.0 / (fan_in + hidden_dim) as f64).sqrt();
        let lim_o = (6.0 / (hidden_dim + v) as f64).sqrt();
        m.params.embed.iter_mut().for_each(|w| *w = rng.gen_range(-0.5..0.5));
        m.params.w_hidden.iter_mut().for_each(|w| *w = rng.gen_range(-lim_h..lim_h));
        m.params.w_out.iter_mut().for_each(|w| *w = rng.gen_range(-lim_o..lim_o));
        Ok(m)
    }

    /// All-zero parameters: every context yields the uniform distribution.
    pub fn zeros(tokenizer: TokenizerSpec, window: usize, embed_dim: usize, hidden_dim: usize) -> Result<Self> {
        if window == 0 || embed_dim == 0 || hidden_dim == 0 {
            return Err(Error::invalid("window, embed_dim and hidden_dim must be positive"));
        }
        let params = Params::zeros(tokenizer.vocab_size(), window, embed_dim, hidden_dim);
        Ok(Self {
            tokenizer,
            window,
            embed_dim,
            hidden_dim,
            seed: 0,
            params,
        })
    }

    pub fn tokenizer(&self) -> &TokenizerSpec {
        &self.tokenizer
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Replaces the parameters; shapes must match.
    pub fn set_params(&mut self, params: Params) -> Result<()> {
        if !self.params.same_shape(&params) {
            return Err(Error::ShapeMismatch("parameter shapes differ".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Last `W` tokens of `prefix`, left-padded with PAD.
    pub fn context_for(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        let w = self.window;
        let mut ctx = Vec::with_capacity(w);
        if prefix.len() < w {
            ctx.resize(w - prefix.len(), self.tokenizer.pad());
            ctx.extend_from_slice(prefix);
        } else {
            ctx.extend_from_slice(&prefix[prefix.len() - w..]);
        }
        ctx
    }

    fn check_context(&self, context: &[TokenId]) -> Result<()> {
        if context.len() != self.window {
            return Err(Error::ShapeMismatch(format!(
                "context has {} tokens, window is {}",
                context.len(),
                self.window
            )));
        }
        let v = self.vocab_size();
        if let Some(bad) = context.iter().find(|&&id| id as usize >= v) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {v}")));
        }
        Ok(())
    }

    fn hidden_of(&self, context: &[TokenId]) -> Vec<f64> {
        let (de, dh) = (self.embed_dim, self.hidden_dim);
        let p = &self.params;
        let mut z = p.b_hidden.clone();
        for (slot, &tok) in context.iter().enumerate() {
            let emb = &p.embed[tok as usize * de..(tok as usize + 1) * de];
            for (k, &e) in emb.iter().enumerate() {
                if e == 0.0 {
                    continue;
                }
                let row = &p.w_hidden[(slot * de + k) * dh..(slot * de + k + 1) * dh];
                for (zj, &w) in z.iter_mut().zip(row) {
                    *zj += e * w;
                }
            }
        }
        z.iter_mut().for_each(|v| *v = v.tanh());
        z
    }

    fn logits_of(&self, hidden: &[f64]) -> Vec<f64> {
        let v = self.vocab_size();
        let p = &self.params;
        let mut out = p.b_out.clone();
        for (j, &a) in hidden.iter().enumerate() {
            let row = &p.w_out[j * v..(j + 1) * v];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += a * w;
            }
        }
        out
    }

    /// Next-token logits for a context of exactly `W` ids.
    pub fn forward_logits(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        self.check_context(context)?;
        Ok(self.logits_of(&self.hidden_of(context)))
    }

    /// Teacher-forced pass keeping activations for backprop.
    pub fn trace(&self, x: &[TokenId], y: &[TokenId]) -> Result<Trace> {
        if y.is_empty() {
            return Err(Error::invalid("response must be non-empty"));
        }
        let mut seq = Vec::with_capacity(1 + x.len() + y.len());
        seq.push(self.tokenizer.bos());
        seq.extend_from_slice(x);
        let base = seq.len();
        seq.extend_from_slice(y);
        let mut logits = LogitsMatrix::zeros(y.len(), self.vocab_size());
        let mut contexts = Vec::with_capacity(y.len());
        let mut hidden = Vec::with_capacity(y.len());
        for t in 0..y.len() {
            let ctx = self.context_for(&seq[..base + t]);
            self.check_context(&ctx)?;
            let h = self.hidden_of(&ctx);
            logits.row_mut(t).copy_from_slice(&self.logits_of(&h));
            contexts.push(ctx);
            hidden.push(h);
        }
        Ok(Trace { logits, contexts, hidden })
    }

    /// Row `t` holds the logits given `BOS + x + y[..t]`.
    pub fn teacher_forcing_logits(&self, x: &[TokenId], y: &[TokenId]) -> Result<LogitsMatrix> {
        Ok(self.trace(x, y)?.logits)
    }

    /// Summed natural-log negative log-likelihood of `y` given `x`.
    pub fn sequence_cross_entropy(&self, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
        let logits = self.teacher_forcing_logits(x, y)?;
        Ok(cross_entropy_of(&logits, y))
    }

    /// Parameter gradients of `Σ_t ⟨logits_t, upstream_t⟩`, i.e. of any loss
    /// whose derivative w.r.t. the teacher-forced logits is `upstream`.
    pub fn backward(&self, x: &[TokenId], y: &[TokenId], upstream: &LogitsMatrix) -> Result<Params> {
        let trace = self.trace(x, y)?;
        self.backward_trace(&trace, upstream)
    }

    pub fn backward_trace(&self, trace: &Trace, upstream: &LogitsMatrix) -> Result<Params> {
        let mut grads = Params::zeros_like(&self.params);
        self.accumulate_backward(trace, upstream, &mut grads)?;
        Ok(grads)
    }

    /// Adds the gradients for `upstream` into `grads`.
    pub fn accumulate_backward(&self, trace: &Trace, upstream: &LogitsMatrix, grads: &mut Params) -> Result<()> {
        let v = self.vocab_size();
        if upstream.rows() != trace.logits.rows() || upstream.cols() != v {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient is {}x{}, expected {}x{}",
                upstream.rows(),
                upstream.cols(),
                trace.logits.rows(),
                v
            )));
        }
        if !grads.same_shape(&self.params) {
            return Err(Error::ShapeMismatch("gradient buffer shape".into()));
        }
        let (de, dh) = (self.embed_dim, self.hidden_dim);
        let p = &self.params;
        let mut dz = vec![0.0; dh];
        for t in 0..upstream.rows() {
            let g = upstream.row(t);
            let a = &trace.hidden[t];
            for (bo, &gv) in grads.b_out.iter_mut().zip(g) {
                *bo += gv;
            }
            for j in 0..dh {
                let row = &p.w_out[j * v..(j + 1) * v];
                let grow = &mut grads.w_out[j * v..(j + 1) * v];
                let mut da = 0.0;
                for ((gw, &w), &gv) in grow.iter_mut().zip(row).zip(g) {
                    *gw += a[j] * gv;
                    da += w * gv;
                }
                dz[j] = da * (1.0 - a[j] * a[j]);
            }
            for (bh, &d) in grads.b_hidden.iter_mut().zip(&dz) {
                *bh += d;
            }
            for (slot, &tok) in trace.contexts[t].iter().enumerate() {
                let tok = tok as usize;
                for k in 0..de {
                    let i = slot * de + k;
                    let e = p.embed[tok * de + k];
                    let row = &p.w_hidden[i * dh..(i + 1) * dh];
                    let grow = &mut grads.w_hidden[i * dh..(i + 1) * dh];
                    let mut din = 0.0;
                    for ((gw, &w), &d) in grow.iter_mut().zip(row).zip(&dz) {
                        *gw += e * d;
                        din += w * d;
                    }
                    grads.embed[tok * de + k] += din;
                }
            }
        }
        Ok(())
    }
}

/// `Σ_t −log softmax(logits_t)[y_t]`.
pub fn cross_entropy_of(logits: &LogitsMatrix, y: &[TokenId]) -> f64 {
    logits
        .iter_rows()
        .zip(y)
        .map(|(row, &tok)| log_sum_exp(row) - row[tok as usize])
        .sum()
}

/// Upstream gradient of the summed cross-entropy: `softmax(z_t) − onehot(y_t)`.
pub fn cross_entropy_grad(logits: &LogitsMatrix, y: &[TokenId]) -> LogitsMatrix {
    let mut g = LogitsMatrix::zeros(logits.rows(), logits.cols());
    for (t, &tok) in y.iter().enumerate().take(logits.rows()) {
        let row = g.row_mut(t);
        row.copy_from_slice(&softmax(logits.row(t)));
        row[tok as usize] -= 1.0;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::TokenizerSpec;

    /// V = 7 (4 specials + a, b, c), W = 2, d_e = 1, d_h = 1.
    fn tiny() -> TinyLM {
        let tok = TokenizerSpec::char_level("abc").unwrap();
        TinyLM::zeros(tok, 2, 1, 1).unwrap()
    }

    #[test]
    fn zero_params_give_uniform() {
        let m = tiny();
        let ctx = m.context_for(&[4]);
        let logits = m.forward_logits(&ctx).unwrap();
        assert!(logits.iter().all(|&z| z == 0.0));
        let p = softmax(&logits);
        assert!(p.iter().all(|&q| (q - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn wrong_context_length_errors() {
        let m = tiny();
        assert!(m.forward_logits(&[4]).is_err());
        assert!(m.forward_logits(&[4, 99]).is_err());
    }

    #[test]
    fn hand_set_weights_match_manual_matmul() {
        let mut m = tiny();
        let p = m.params_mut();
        // embeddings: id -> id * 0.1
        for i in 0..7 {
            p.embed[i] = i as f64 * 0.1;
        }
        p.w_hidden = vec![0.5, -1.0];
        p.b_hidden = vec![0.2];
        p.w_out = (0..7).map(|i| i as f64 - 3.0).collect();
        p.b_out = (0..7).map(|i| 0.01 * i as f64).collect();
        let logits = m.forward_logits(&[4, 6]).unwrap();
        // input = [0.4, 0.6]; z = 0.4*0.5 + 0.6*(-1.0) + 0.2 = -0.2
        let h = (-0.2f64).tanh();
        for (i, &z) in logits.iter().enumerate() {
            let want = h * (i as f64 - 3.0) + 0.01 * i as f64;
            assert!((z - want).abs() < 1e-12);
        }
    }

    #[test]
    fn context_left_pads() {
        let m = tiny();
        assert_eq!(m.context_for(&[0]), vec![m.tokenizer().pad(), 0]);
        assert_eq!(m.context_for(&[0, 4, 5]), vec![4, 5]);
    }

    #[test]
    fn empty_response_errors() {
        let m = tiny();
        assert!(m.teacher_forcing_logits(&[4], &[]).is_err());
    }

    #[test]
    fn uniform_cross_entropy() {
        let m = tiny();
        let ce = m.sequence_cross_entropy(&[4], &[4, 5, 6]).unwrap();
        assert!((ce - 3.0 * 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn upstream_shape_checked() {
        let m = tiny();
        let up = LogitsMatrix::zeros(2, 7);
        assert!(m.backward(&[4], &[5], &up).is_err());
    }
}
