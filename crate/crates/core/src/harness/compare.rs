use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::experiment::{EvalReport, ExperimentConfig, PreparedExperiment};
use super::strategy::StrategyName;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: StrategyName,
    pub seed: u64,
    pub per_task: BTreeMap<String, f64>,
    pub macro_average: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseWins {
    pub a: StrategyName,
    pub b: StrategyName,
    /// Seeds where `a` has the strictly higher macro average.
    pub a_wins: usize,
    pub b_wins: usize,
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub strategies: Vec<StrategyName>,
    pub seeds: Vec<u64>,
    pub rows: Vec<ComparisonRow>,
    pub mean_macro: BTreeMap<StrategyName, f64>,
    pub mean_perplexity: BTreeMap<StrategyName, f64>,
    pub pairwise: Vec<PairwiseWins>,
    pub reports: Vec<EvalReport>,
}

impl Comparison {
    /// Builds the table and aggregates from finished reports.
    pub fn from_reports(strategies: &[StrategyName], seeds: &[u64], reports: Vec<EvalReport>) -> Result<Self> {
        let rows: Vec<ComparisonRow> = reports
            .iter()
            .map(|r| ComparisonRow {
                strategy: r.strategy.name,
                seed: r.seed,
                per_task: r.metrics.per_task.clone(),
                macro_average: r.metrics.macro_average,
                perplexity: r.metrics.perplexity,
            })
            .collect();
        let cell = |s: StrategyName, seed: u64| {
            rows.iter()
                .find(|r| r.strategy == s && r.seed == seed)
                .ok_or_else(|| Error::invalid(format!("no run for {s} seed {seed}")))
        };
        let mut mean_macro = BTreeMap::new();
        let mut mean_perplexity = BTreeMap::new();
        for &s in strategies {
            let (mut m, mut p) = (0.0, 0.0);
            for &seed in seeds {
                let c = cell(s, seed)?;
                m += c.macro_average;
                p += c.perplexity;
            }
            mean_macro.insert(s, m / seeds.len() as f64);
            mean_perplexity.insert(s, p / seeds.len() as f64);
        }
        let mut pairwise = Vec::new();
        for (i, &a) in strategies.iter().enumerate() {
            for &b in &strategies[i + 1..] {
                let mut w = PairwiseWins {
                    a,
                    b,
                    a_wins: 0,
                    b_wins: 0,
                    ties: 0,
                };
                for &seed in seeds {
                    let (x, y) = (cell(a, seed)?.macro_average, cell(b, seed)?.macro_average);
                    if x > y {
                        w.a_wins += 1;
                    } else if y > x {
                        w.b_wins += 1;
                    } else {
                        w.ties += 1;
                    }
                }
                pairwise.push(w);
            }
        }
        Ok(Self {
            strategies: strategies.to_vec(),
            seeds: seeds.to_vec(),
            rows,
            mean_macro,
            mean_perplexity,
            pairwise,
            reports,
        })
    }

    pub fn wins(&self, a: StrategyName, b: StrategyName) -> Option<usize> {
        self.pairwise.iter().find_map(|w| {
            if w.a == a && w.b == b {
                Some(w.a_wins)
            } else if w.a == b && w.b == a {
                Some(w.b_wins)
            } else {
                None
            }
        })
    }

    /// Per-seed rows, per-strategy means and pairwise win counts as
    /// markdown tables.
    pub fn to_markdown(&self) -> String {
        let tasks: Vec<String> = self
            .rows
            .first()
            .map(|r| r.per_task.keys().cloned().collect())
            .unwrap_or_default();
        let mut s = String::new();
        let _ = write!(s, "| strategy | seed |");
        for t in &tasks {
            let _ = write!(s, " {t} |");
        }
        s.push_str(" macro | ppl |\n|---|---|");
        s.push_str(&"---|".repeat(tasks.len() + 2));
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "| {} | {} |", r.strategy, r.seed);
            for t in &tasks {
                let _ = write!(s, " {:.3} |", r.per_task.get(t).copied().unwrap_or(f64::NAN));
            }
            let _ = writeln!(s, " {:.4} | {:.3} |", r.macro_average, r.perplexity);
        }
        let best = self.mean_macro.values().copied().fold(f64::NEG_INFINITY, f64::max);
        s.push_str("\n| strategy | mean macro | mean ppl |\n|---|---|---|\n");
        for st in &self.strategies {
            let m = self.mean_macro[st];
            let shown = if m == best { format!("**{m:.4}**") } else { format!("{m:.4}") };
            let _ = writeln!(s, "| {st} | {shown} | {:.3} |", self.mean_perplexity[st]);
        }
        if !self.pairwise.is_empty() {
            s.push_str("\n| A | B | A wins | B wins | ties |\n|---|---|---|---|---|\n");
            for w in &self.pairwise {
                let _ = writeln!(s, "| {} | {} | {} | {} | {} |", w.a, w.b, w.a_wins, w.b_wins, w.ties);
            }
        }
        s
    }
}

/// Runs every strategy on every seed. Seeds run on separate threads; each
/// seed prepares its own sources and snapshots and shares nothing mutable.
pub fn compare_strategies(
    config: &ExperimentConfig,
    strategies: &[StrategyName],
    seeds: &[u64],
    threads: usize,
) -> Result<Comparison> {
    if strategies.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("need at least one strategy and one seed"));
    }
    let run_seed = |seed: u64| -> Result<Vec<EvalReport>> {
        let prep = PreparedExperiment::new(config, seed)?;
        strategies.iter().map(|&s| prep.run(s)).collect()
    };
    let per_seed: Vec<Result<Vec<EvalReport>>> = if threads <= 1 {
        seeds.iter().map(|&s| run_seed(s)).collect()
    } else {
        let mut out: Vec<Option<Result<Vec<EvalReport>>>> = (0..seeds.len()).map(|_| None).collect();
        for chunk in seeds.iter().enumerate().collect::<Vec<_>>().chunks(threads) {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&(i, &seed)| (i, scope.spawn(move || run_seed(seed))))
                    .collect();
                for (i, h) in handles {
                    out[i] = Some(h.join().unwrap_or_else(|_| Err(Error::invalid("worker thread panicked"))));
                }
            });
        }
        out.into_iter().map(|r| r.expect("every seed ran")).collect()
    };
    let mut reports = Vec::new();
    for r in per_seed {
        reports.extend(r?);
    }
    Comparison::from_reports(strategies, seeds, reports)
}

/// Worker threads to use by default.
pub fn default_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}
