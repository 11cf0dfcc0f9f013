//! End-to-end experiments: complementary source models, snapshots,
//! advantage records, strategy runs, evaluation and comparison.

mod compare;
mod eval;
mod experiment;
mod strategy;
mod train;

pub use compare::{compare_strategies, default_threads, Comparison, ComparisonRow, PairwiseWins};
pub use eval::{evaluate, EvalMetrics, EvalSuite};
pub use experiment::{
    analyze_advantage, build_fusion_data, build_scorers, snapshot_store_hash, stage_seed, AdvantageSummary, EvalReport,
    ExperimentConfig, PreparedExperiment, ScorerKind,
};
pub use strategy::{curriculum_order, train_strategy, FusionData, RunTrace, StrategyName, StrategySpec};
pub use train::{
    encode_examples, epoch_order, sft_train, steps_per_epoch, train_source_models, ModelDims, SourceSpec, TaskShape,
    TrainConfig,
};
