//! Trains two small complementary sources and compares which one wins
//! each example under teacher-forced cross-entropy versus a reward-scorer
//! vote over their own generations.
//!
//!     cargo run --release --example advantage_modes

use fusion_lab::advantage::{build_advantage_records, RewardScorer};
use fusion_lab::corpus::{synthesize_mixture, TaskKind};
use fusion_lab::distillstore::preprocess;
use fusion_lab::harness::{analyze_advantage, build_scorers, stage_seed, train_source_models, ExperimentConfig};

fn main() -> fusion_lab::Result<()> {
    let mut cfg = ExperimentConfig::default();
    for s in &mut cfg.sources {
        s.epochs = 15;
        s.n_train = 1000;
    }
    let shape = &cfg.shape;
    println!("training {} sources...", cfg.sources.len());
    let sources = train_source_models(&cfg.sources, shape, stage_seed(0, "sources"))?;
    let data = synthesize_mixture(&cfg.fusion_mixture, shape.alphabet_size, shape.min_len, shape.max_len, 300, 11, "adv")?;
    let snapshots = preprocess(&data, &sources, &cfg.preprocess)?;

    let scorers = build_scorers(&cfg, &sources[0].model);
    let panel: Vec<&dyn RewardScorer> = scorers.iter().map(|b| b.as_ref()).collect();
    let records = build_advantage_records(&data, &sources, &panel, Some(0), &snapshots, cfg.ce_normalization)?;
    let ids: Vec<String> = sources.iter().map(|s| s.id.clone()).collect();
    let summary = analyze_advantage(&records, &ids)?;

    println!("{:<14} {:>10} {:>10}", "model", "train win", "infer win");
    for (i, id) in ids.iter().enumerate() {
        println!("{id:<14} {:>10.3} {:>10.3}", summary.train_fraction[i], summary.infer_fraction[i]);
    }
    println!("modes disagree on {:.1}% of examples", 100.0 * summary.disagreement);

    for kind in TaskKind::ALL {
        let rs: Vec<_> = records.iter().zip(&data).filter(|(_, e)| e.instruction.starts_with(kind.name())).map(|(r, _)| r).collect();
        let t0 = rs.iter().filter(|r| r.train_winner == 0).count();
        let i0 = rs.iter().filter(|r| r.infer_winner == 0).count();
        println!("{:<8} n={:<4} {} wins train {t0:>3}, infer {i0:>3}", kind.name(), rs.len(), ids[0]);
    }
    Ok(())
}
