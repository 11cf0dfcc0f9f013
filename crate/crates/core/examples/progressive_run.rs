//! One seed end to end: sources, snapshots, advantage records, then the
//! target trained with the progressive schedule and with plain SFT.
//!
//!     cargo run --release --example progressive_run [seed]

use fusion_lab::harness::{ExperimentConfig, PreparedExperiment, StrategyName};

fn main() -> fusion_lab::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let config = ExperimentConfig::default();
    let prep = PreparedExperiment::new(&config, seed)?;
    for (s, m) in prep.sources.iter().zip(&prep.source_metrics) {
        println!("source {:<14} macro {:.3} {:?}", s.id, m.macro_average, m.per_task);
    }
    println!("target starts from {}", prep.sources[prep.target_source].id);
    let a = &prep.advantage;
    println!("train-mode wins {:?}, infer-mode wins {:?}", a.train_wins, a.infer_wins);

    for name in [StrategyName::Csft, StrategyName::ProFuser] {
        let r = prep.run(name)?;
        println!(
            "{:<9} macro {:.4} ppl {:.3} epoch losses {:?}",
            name.as_str(),
            r.metrics.macro_average,
            r.metrics.perplexity,
            r.trace.epoch_losses.iter().map(|l| format!("{l:.3}")).collect::<Vec<_>>()
        );
    }
    Ok(())
}
