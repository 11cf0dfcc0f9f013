//! Two tokenizations of the same text and the transfer of a teacher's
//! per-position distributions from one vocabulary to the other.
//!
//!     cargo run --example tokenizer_alignment

use fusion_lab::align::{align_positions, build_alignment_map, transfer_rows, FallbackPolicy};
use fusion_lab::distillstore::SparseDistribution;
use fusion_lab::tinylm::{TokenizerKind, TokenizerSpec};

fn show(tok: &TokenizerSpec, d: &SparseDistribution) -> String {
    let parts: Vec<String> = d.iter().map(|(id, p)| format!("{:?}:{p:.2}", tok.token_text(id))).collect();
    format!("[{}] residual {:.2}", parts.join(" "), d.residual())
}

fn main() -> fusion_lab::Result<()> {
    let chars = TokenizerSpec::for_tasks(TokenizerKind::Char, 5)?;
    let merge = TokenizerSpec::for_tasks(TokenizerKind::GreedyMerge, 5)?;
    let text = "abca";
    let (src, tgt) = (chars.encode(text), merge.encode(text));
    let pieces = |t: &TokenizerSpec, ids: &[u32]| ids.iter().map(|&i| t.token_text(i).to_string()).collect::<Vec<_>>();
    println!("char : {:?}", pieces(&chars, &src));
    println!("merge: {:?}", pieces(&merge, &tgt));

    let spans = align_positions(&src, &chars, &tgt, &merge)?;
    println!("spans (source -> target): {:?}", spans.pairs);

    // a confident teacher that predicts the next character at every position
    let id = |s: &str| chars.id_of(s).unwrap();
    let rows: Vec<SparseDistribution> = text
        .chars()
        .map(|c| {
            let other = if c == 'a' { "b" } else { "a" };
            SparseDistribution::new(vec![id(&c.to_string()), id(other)], vec![0.8, 0.15], 0.05)
        })
        .collect::<Result<_, _>>()?;

    let map = build_alignment_map(&chars, &merge, FallbackPolicy::LongestCommonPrefix);
    let moved = transfer_rows(&src, &rows, &tgt, &map)?;
    for (t, row) in tgt.iter().zip(&moved) {
        println!("target {:?}: {}", merge.token_text(*t), show(&merge, row));
        assert!((row.kept_mass() + row.residual() - 1.0).abs() < 1e-9);
    }
    Ok(())
}
