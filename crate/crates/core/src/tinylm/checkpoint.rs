use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::TinyLM;
use crate::error::{Error, Result};

const FORMAT: &str = "fusion-lab/tinylm";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: TinyLM,
}

/// Writes a JSON checkpoint. Floats are printed in shortest round-trip
/// form, so a reload reproduces every parameter bit-for-bit.
pub fn save_checkpoint(model: &TinyLM, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ck = Checkpoint {
        format: FORMAT.into(),
        version: VERSION,
        model: model.clone(),
    };
    let json = serde_json::to_string(&ck)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TinyLM> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    if ck.format != FORMAT || ck.version != VERSION {
        return Err(Error::Serde(format!(
            "unsupported checkpoint {} v{}",
            ck.format, ck.version
        )));
    }
    let m = ck.model;
    let p = m.params();
    let v = m.vocab_size();
    let (w, de, dh) = (m.window(), m.embed_dim(), m.hidden_dim());
    let ok = p.embed.len() == v * de
        && p.w_hidden.len() == w * de * dh
        && p.b_hidden.len() == dh
        && p.w_out.len() == dh * v
        && p.b_out.len() == v;
    if !ok {
        return Err(Error::ShapeMismatch("checkpoint tensors disagree with declared dimensions".into()));
    }
    if !p.is_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok(m)
}
