//! Every strategy over several seeds, rendered as markdown tables.
//!
//!     cargo run --release --example compare_strategies [n_seeds]

use fusion_lab::harness::{compare_strategies, default_threads, ExperimentConfig, StrategyName};

fn main() -> fusion_lab::Result<()> {
    let n: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let seeds: Vec<u64> = (0..n).collect();
    let c = compare_strategies(&ExperimentConfig::default(), &StrategyName::ALL, &seeds, default_threads())?;
    print!("{}", c.to_markdown());
    Ok(())
}
