//! The fusion objective on a single item: SFT cross-entropy plus a
//! weighted KL to the teacher rows, its gradient checked against central
//! differences, and the per-epoch mode weights.
//!
//!     cargo run --release --example fusion_loss

use fusion_lab::distillstore::SparsifyParams;
use fusion_lab::fuse::{fusion_loss, phase_schedule, profuser_loss, FusionConfig, FusionItem, KlSettings, PhaseWeights};
use fusion_lab::tinylm::{TinyLM, TokenizerKind, TokenizerSpec};

fn main() -> fusion_lab::Result<()> {
    let tok = TokenizerSpec::for_tasks(TokenizerKind::Char, 4)?;
    let model = TinyLM::new(tok.clone(), 8, 4, 12, 3)?;
    let teacher = TinyLM::new(tok.clone(), 8, 4, 12, 99)?;
    let x = tok.encode("REVERSE : abc =");
    let mut y = tok.encode("cba");
    y.push(tok.eos());
    let rows = teacher
        .teacher_forcing_logits(&x, &y)?
        .iter_rows()
        .map(|r| SparsifyParams::default().apply(r))
        .collect::<fusion_lab::Result<Vec<_>>>()?;
    let item = FusionItem { x, y, teacher_rows: rows };
    let kl = KlSettings::default();

    for beta in [0.0, 0.1, 0.5] {
        let (loss, _) = fusion_loss(&model, &item, beta, &kl)?;
        println!("beta {beta:<4} loss {loss:.6}");
    }

    let w = PhaseWeights::uniform(0.1, 1.0, 0.5);
    let (_, grads) = profuser_loss(&model, Some(&item), Some(&item), &w, &kl)?;
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for idx in (0..model.params().num_params()).step_by(37) {
        let probe = |delta: f64| -> fusion_lab::Result<f64> {
            let mut m = model.clone();
            let v = m.params().get_flat(idx);
            m.params_mut().set_flat(idx, v + delta);
            Ok(profuser_loss(&m, Some(&item), Some(&item), &w, &kl)?.0)
        };
        let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
        let analytic = grads.get_flat(idx);
        worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8));
    }
    println!("max relative gradient error over sampled parameters: {worst:.2e}");

    let schedule = FusionConfig::default();
    for epoch in 1..=schedule.total_epochs() {
        println!("epoch {epoch}: (w1, w2, beta) = {:?}", phase_schedule(&schedule, epoch)?.as_tuple());
    }
    Ok(())
}
