use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalMetrics, EvalSuite};
use super::strategy::{train_strategy, FusionData, RunTrace, StrategyName, StrategySpec};
use super::train::{train_source_models, SourceSpec, TaskShape, TrainConfig};
use crate::advantage::{
    build_advantage_records, supervised_tokens, AdvantageRecord, CeNormalization, LogLikelihoodScorer, MetricUnit,
    ReferenceSimilarityScorer, RewardScorer, SourceModel, TaskCorrectnessScorer,
};
use crate::align::{build_alignment_map, transfer_rows, AlignmentMap, FallbackPolicy};
use crate::corpus::{split_by_difficulty, synthesize_mixture, DifficultyCriterion, Example, TaskKind};
use crate::distillstore::{preprocess, Mode, PreprocessConfig, SnapshotStore};
use crate::error::{Error, Result};
use crate::fuse::{FusionConfig, FusionItem};
use crate::tinylm::{DecodingParams, TinyLM, TokenizerKind};
use crate::util::{mix_seed, mix_seeds, sha256_hex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Correctness,
    Reference,
    Loglik,
}

impl std::str::FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correctness" => Ok(ScorerKind::Correctness),
            "reference" => Ok(ScorerKind::Reference),
            "loglik" => Ok(ScorerKind::Loglik),
            other => Err(Error::invalid(format!("unknown scorer `{other}`"))),
        }
    }
}

/// Everything needed to reproduce one experiment from a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub shape: TaskShape,
    pub sources: Vec<SourceSpec>,
    pub fusion_mixture: Vec<(TaskKind, f64)>,
    pub n_fusion: usize,
    pub eval_tasks: Vec<TaskKind>,
    pub n_eval_per_task: usize,
    pub eval_max_new_tokens: usize,
    pub preprocess: PreprocessConfig,
    pub scorers: Vec<ScorerKind>,
    /// Settles tied votes; must be one of `scorers`.
    pub strongest_scorer: Option<ScorerKind>,
    pub metric_unit: MetricUnit,
    pub ce_normalization: CeNormalization,
    pub alignment: FallbackPolicy,
    pub fusion: FusionConfig,
    pub target_train: TrainConfig,
}

impl Default for ExperimentConfig {
    /// Two sources with complementary skills and different tokenizers.
    fn default() -> Self {
        let source_train = TrainConfig {
            cosine_decay: true,
            ..TrainConfig::default()
        };
        Self {
            shape: TaskShape::default(),
            sources: vec![
                SourceSpec {
                    id: "reverse-merge".into(),
                    tokenizer: TokenizerKind::GreedyMerge,
                    mixture: vec![(TaskKind::Reverse, 0.8), (TaskKind::Copy, 0.2)],
                    n_train: 2000,
                    epochs: 30,
                    dims: Default::default(),
                    train: source_train.clone(),
                    seed_offset: 0,
                },
                SourceSpec {
                    id: "modsum-char".into(),
                    tokenizer: TokenizerKind::Char,
                    mixture: vec![(TaskKind::Modsum, 0.8), (TaskKind::Copy, 0.2)],
                    n_train: 2000,
                    epochs: 30,
                    dims: Default::default(),
                    train: source_train,
                    seed_offset: 0,
                },
            ],
            fusion_mixture: TaskKind::ALL.iter().map(|&k| (k, 1.0)).collect(),
            n_fusion: 1000,
            eval_tasks: TaskKind::ALL.to_vec(),
            n_eval_per_task: 400,
            eval_max_new_tokens: 12,
            preprocess: PreprocessConfig::default(),
            scorers: vec![ScorerKind::Correctness, ScorerKind::Reference, ScorerKind::Loglik],
            strongest_scorer: Some(ScorerKind::Correctness),
            metric_unit: MetricUnit::Char,
            ce_normalization: CeNormalization::Sum,
            alignment: FallbackPolicy::default(),
            fusion: FusionConfig::default(),
            target_train: TrainConfig {
                lr: 0.02,
                ..TrainConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    /// Reads TOML or JSON, chosen by file extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            Ok(serde_json::from_str(&text)?)
        } else {
            toml::from_str(&text).map_err(|e| Error::Serde(e.to_string()))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Applies `key=value` overrides. Keys are dotted paths into the TOML
    /// form of the config, with numeric segments indexing arrays
    /// (`sources.0.epochs=10`). Values are TOML literals; anything that does
    /// not parse as one is taken as a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Serde(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("override `{o}` is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut node = &mut root;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (depth, part) in parts.iter().enumerate() {
                let last = depth + 1 == parts.len();
                node = match node {
                    toml::Value::Table(t) => {
                        if last {
                            t.insert(part.to_string(), value.clone());
                            break;
                        }
                        t.get_mut(*part)
                            .ok_or_else(|| Error::invalid(format!("unknown config key `{key}`")))?
                    }
                    toml::Value::Array(a) => {
                        let i: usize = part
                            .parse()
                            .map_err(|_| Error::invalid(format!("`{part}` in `{key}` is not an index")))?;
                        let slot = a
                            .get_mut(i)
                            .ok_or_else(|| Error::invalid(format!("index {i} out of range in `{key}`")))?;
                        if last {
                            *slot = value.clone();
                            break;
                        }
                        slot
                    }
                    _ => return Err(Error::invalid(format!("`{key}` descends into a scalar"))),
                };
            }
        }
        let out: Self = root.try_into().map_err(|e: toml::de::Error| Error::Serde(e.to_string()))?;
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::invalid("at least one source required"));
        }
        if self.n_fusion == 0 || self.n_eval_per_task == 0 || self.eval_tasks.is_empty() {
            return Err(Error::invalid("fusion and eval sets must be non-empty"));
        }
        if self.scorers.is_empty() {
            return Err(Error::invalid("at least one reward scorer required"));
        }
        if let Some(s) = self.strongest_scorer {
            if !self.scorers.contains(&s) {
                return Err(Error::invalid(format!("strongest scorer {s:?} is not in the panel")));
            }
        }
        self.fusion.validate()?;
        self.target_train.validate()
    }
}

/// Per-model win counts and fractions in each advantage mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSummary {
    pub model_ids: Vec<String>,
    pub n_examples: usize,
    pub train_wins: Vec<usize>,
    pub infer_wins: Vec<usize>,
    pub train_fraction: Vec<f64>,
    pub infer_fraction: Vec<f64>,
    /// Share of examples whose two modes pick different winners.
    pub disagreement: f64,
}

impl AdvantageSummary {
    /// Model with the most training-mode wins (lowest index on ties).
    pub fn dominant(&self) -> usize {
        let mut best = 0;
        for (i, &w) in self.train_wins.iter().enumerate() {
            if w > self.train_wins[best] {
                best = i;
            }
        }
        best
    }

    /// Training-mode minus inference-mode win fraction of the dominant model.
    pub fn dominant_gap(&self) -> f64 {
        let d = self.dominant();
        self.train_fraction[d] - self.infer_fraction[d]
    }
}

pub fn analyze_advantage(records: &[AdvantageRecord], model_ids: &[String]) -> Result<AdvantageSummary> {
    if records.is_empty() {
        return Err(Error::invalid("no advantage records"));
    }
    let n = model_ids.len();
    let mut train_wins = vec![0usize; n];
    let mut infer_wins = vec![0usize; n];
    let mut disagree = 0usize;
    for r in records {
        if r.train_winner >= n || r.infer_winner >= n {
            return Err(Error::invalid(format!("record {} names a model outside the panel", r.example_id)));
        }
        train_wins[r.train_winner] += 1;
        infer_wins[r.infer_winner] += 1;
        disagree += usize::from(r.train_winner != r.infer_winner);
    }
    let total = records.len() as f64;
    let frac = |w: &[usize]| w.iter().map(|&c| c as f64 / total).collect();
    Ok(AdvantageSummary {
        model_ids: model_ids.to_vec(),
        n_examples: records.len(),
        train_fraction: frac(&train_wins),
        infer_fraction: frac(&infer_wins),
        train_wins,
        infer_wins,
        disagreement: disagree as f64 / total,
    })
}

/// Builds the scorer panel. The embedder and likelihood model is the target.
pub fn build_scorers(config: &ExperimentConfig, target: &TinyLM) -> Vec<Box<dyn RewardScorer>> {
    config
        .scorers
        .iter()
        .map(|k| -> Box<dyn RewardScorer> {
            match k {
                ScorerKind::Correctness => Box::new(TaskCorrectnessScorer::new(config.shape.alphabet_size)),
                ScorerKind::Reference => Box::new(ReferenceSimilarityScorer {
                    embedder: target.clone(),
                    unit: config.metric_unit,
                }),
                ScorerKind::Loglik => Box::new(LogLikelihoodScorer { model: target.clone() }),
            }
        })
        .collect()
}

fn to_target(
    target: &TinyLM,
    x_text: &str,
    snapshot: &crate::distillstore::SnapshotRecord,
    y: Vec<crate::tinylm::TokenId>,
    map: &AlignmentMap,
) -> Result<FusionItem> {
    let teacher_rows = transfer_rows(&snapshot.response_token_ids, &snapshot.rows, &y, map)?;
    let item = FusionItem {
        x: target.tokenizer().encode(x_text),
        y,
        teacher_rows,
    };
    item.validate()?;
    Ok(item)
}

/// Converts advantage records into target-vocabulary fusion items.
pub fn build_fusion_data(
    dataset: &[Example],
    sources: &[SourceModel],
    records: &[AdvantageRecord],
    snapshots: &SnapshotStore,
    target: &TinyLM,
    policy: FallbackPolicy,
) -> Result<FusionData> {
    if records.len() != dataset.len() {
        return Err(Error::ShapeMismatch("one advantage record per example required".into()));
    }
    let maps: Vec<AlignmentMap> = sources
        .iter()
        .map(|s| build_alignment_map(s.model.tokenizer(), target.tokenizer(), policy))
        .collect();
    let tok = target.tokenizer();
    let mut data = FusionData::default();
    for (ex, r) in dataset.iter().zip(records) {
        if ex.id != r.example_id {
            return Err(Error::invalid(format!("record {} out of order with example {}", r.example_id, ex.id)));
        }
        let ts = &sources[r.train_winner];
        let snap = snapshots.require(&ex.id, &ts.id, Mode::Train)?;
        let y = supervised_tokens(target, &ex.response);
        data.train.push(to_target(target, &ex.instruction, snap, y, &maps[r.train_winner])?);

        let is = &sources[r.infer_winner];
        let snap = snapshots.require(&ex.id, &is.id, Mode::Infer)?;
        let mut y = tok.encode(&r.infer_text);
        if snap.response_token_ids.last() == Some(&is.model.tokenizer().eos()) {
            y.push(tok.eos());
        }
        data.infer.push(to_target(target, &ex.instruction, snap, y, &maps[r.infer_winner])?);
        data.example_ids.push(ex.id.clone());
    }
    Ok(data)
}

/// Sources, snapshots, advantage records, and fusion items for one seed.
/// Every strategy run for that seed starts from this shared state.
#[derive(Debug, Clone)]
pub struct PreparedExperiment {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub sources: Vec<SourceModel>,
    pub source_metrics: Vec<EvalMetrics>,
    pub target_source: usize,
    pub target_init: TinyLM,
    pub dataset: Vec<Example>,
    pub snapshots: SnapshotStore,
    pub snapshot_hash: String,
    pub records: Vec<AdvantageRecord>,
    pub advantage: AdvantageSummary,
    pub data: FusionData,
    pub eval: EvalSuite,
}

/// Seed of one pipeline stage (`"sources"`, `"eval"`, ...) for a run seed.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    stage.bytes().fold(mix_seeds(&[seed]), |acc, b| mix_seed(acc, u64::from(b)))
}

/// Hash of the snapshot contents in key order.
pub fn snapshot_store_hash(store: &SnapshotStore) -> Result<String> {
    let bytes = serde_json::to_vec(&store.sorted())?;
    Ok(sha256_hex(&bytes))
}

impl PreparedExperiment {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let shape = &config.shape;
        let sources = train_source_models(&config.sources, shape, stage_seed(seed, "sources"))?;
        let eval = EvalSuite::synthesize(
            &config.eval_tasks,
            shape.alphabet_size,
            shape.min_len,
            shape.max_len,
            config.n_eval_per_task,
            stage_seed(seed, "eval"),
        )?;
        Self::from_sources(config, seed, sources, eval)
    }

    /// Continues the pipeline from already trained sources.
    pub fn from_sources(config: &ExperimentConfig, seed: u64, sources: Vec<SourceModel>, eval: EvalSuite) -> Result<Self> {
        let shape = &config.shape;
        let source_metrics = sources
            .iter()
            .map(|s| evaluate(&s.model, &eval, config.eval_max_new_tokens))
            .collect::<Result<Vec<_>>>()?;
        let mut target_source = 0;
        for (i, m) in source_metrics.iter().enumerate() {
            if m.macro_average > source_metrics[target_source].macro_average {
                target_source = i;
            }
        }
        let target_init = sources[target_source].model.clone();
        let dataset = synthesize_mixture(
            &config.fusion_mixture,
            shape.alphabet_size,
            shape.min_len,
            shape.max_len,
            config.n_fusion,
            stage_seed(seed, "fusion-data"),
            "fuse",
        )?;
        let pcfg = PreprocessConfig {
            seed: mix_seeds(&[config.preprocess.seed, stage_seed(seed, "preprocess")]),
            ..config.preprocess.clone()
        };
        let snapshots = preprocess(&dataset, &sources, &pcfg)?;
        let snapshot_hash = snapshot_store_hash(&snapshots)?;
        let scorers = build_scorers(config, &target_init);
        let panel: Vec<&dyn RewardScorer> = scorers.iter().map(|b| b.as_ref()).collect();
        let strongest = config.strongest_scorer.and_then(|s| config.scorers.iter().position(|k| *k == s));
        let records = build_advantage_records(&dataset, &sources, &panel, strongest, &snapshots, config.ce_normalization)?;
        let ids: Vec<String> = sources.iter().map(|s| s.id.clone()).collect();
        let advantage = analyze_advantage(&records, &ids)?;
        let data = build_fusion_data(&dataset, &sources, &records, &snapshots, &target_init, config.alignment)?;
        Ok(Self {
            config: config.clone(),
            seed,
            sources,
            source_metrics,
            target_source,
            target_init,
            dataset,
            snapshots,
            snapshot_hash,
            records,
            advantage,
            data,
            eval,
        })
    }

    /// `(easy, hard)` example indices under `criterion`.
    pub fn difficulty_split(&self, criterion: DifficultyCriterion) -> Result<(Vec<usize>, Vec<usize>)> {
        let scorer = match criterion {
            DifficultyCriterion::GtLength => None,
            DifficultyCriterion::RmScore => {
                let kind = self.config.strongest_scorer.unwrap_or(self.config.scorers[0]);
                let cfg = ExperimentConfig {
                    scorers: vec![kind],
                    ..self.config.clone()
                };
                build_scorers(&cfg, &self.target_init).pop()
            }
        };
        let (easy, hard) = split_by_difficulty(&self.dataset, criterion, scorer.as_deref(), Some(&self.target_init))?;
        let pos: HashMap<&str, usize> = self.dataset.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
        let idx = |v: Vec<Example>| v.iter().map(|e| pos[e.id.as_str()]).collect();
        Ok((idx(easy), idx(hard)))
    }

    pub fn run(&self, name: StrategyName) -> Result<EvalReport> {
        self.run_spec(&StrategySpec::from_base(name, &self.config.fusion))
    }

    /// Trains a fresh copy of the target under `spec` and evaluates it.
    pub fn run_spec(&self, spec: &StrategySpec) -> Result<EvalReport> {
        let (model, trace) = self.train(spec)?;
        let metrics = evaluate(&model, &self.eval, self.config.eval_max_new_tokens)?;
        Ok(EvalReport {
            strategy: spec.clone(),
            seed: self.seed,
            metrics,
            advantage: self.advantage.clone(),
            source_metrics: self
                .sources
                .iter()
                .zip(&self.source_metrics)
                .map(|(s, m)| (s.id.clone(), m.clone()))
                .collect(),
            target_source: self.sources[self.target_source].id.clone(),
            snapshot_hash: self.snapshot_hash.clone(),
            trace,
            config: self.config.clone(),
        })
    }

    pub fn train(&self, spec: &StrategySpec) -> Result<(TinyLM, RunTrace)> {
        let split = spec.curriculum.map(|c| self.difficulty_split(c)).transpose()?;
        let mut model = self.target_init.clone();
        let trace = train_strategy(
            &mut model,
            spec,
            &self.data,
            split.as_ref().map(|(e, h)| (e.as_slice(), h.as_slice())),
            &self.config.target_train,
            stage_seed(self.seed, "target-train"),
        )?;
        Ok((model, trace))
    }

    /// The ground-truth token pairs in target vocabulary, as seen by the
    /// training-mode term.
    pub fn sft_pairs(&self) -> Vec<(Vec<crate::tinylm::TokenId>, Vec<crate::tinylm::TokenId>)> {
        self.data.train.iter().map(|i| (i.x.clone(), i.y.clone())).collect()
    }

    /// Seed used for the target's data order.
    pub fn train_seed(&self) -> u64 {
        stage_seed(self.seed, "target-train")
    }

    pub fn greedy_decoding(&self) -> DecodingParams {
        DecodingParams::greedy(self.config.eval_max_new_tokens)
    }
}

/// Outcome of one (strategy, seed) run with everything needed to
/// reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: StrategySpec,
    pub seed: u64,
    pub metrics: EvalMetrics,
    pub advantage: AdvantageSummary,
    pub source_metrics: BTreeMap<String, EvalMetrics>,
    pub target_source: String,
    pub snapshot_hash: String,
    pub trace: RunTrace,
    pub config: ExperimentConfig,
}

impl EvalReport {
    /// Re-runs the experiment from the embedded config and seed.
    pub fn reproduce(&self) -> Result<EvalReport> {
        PreparedExperiment::new(&self.config, self.seed)?.run_spec(&self.strategy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, t: usize, i: usize) -> AdvantageRecord {
        let key = crate::advantage::SnapshotKey {
            example_id: id.into(),
            model_id: String::new(),
            mode: Mode::Train,
        };
        AdvantageRecord {
            example_id: id.into(),
            train_winner: t,
            train_winner_id: String::new(),
            train_ce: vec![],
            infer_winner: i,
            infer_winner_id: String::new(),
            infer_votes: vec![],
            infer_response: vec![],
            infer_text: String::new(),
            train_rows: key.clone(),
            infer_rows: key,
        }
    }

    #[test]
    fn win_fractions() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let all0: Vec<_> = (0..4).map(|k| rec(&k.to_string(), 0, 0)).collect();
        let s = analyze_advantage(&all0, &ids).unwrap();
        assert_eq!(s.train_fraction, vec![1.0, 0.0]);
        assert_eq!(s.infer_fraction, vec![1.0, 0.0]);
        assert_eq!(s.disagreement, 0.0);

        let mixed = vec![rec("0", 1, 0), rec("1", 1, 1), rec("2", 1, 0), rec("3", 0, 0)];
        let s = analyze_advantage(&mixed, &ids).unwrap();
        assert_eq!(s.dominant(), 1);
        assert!((s.dominant_gap() - 0.5).abs() < 1e-12);
        assert!((s.disagreement - 0.5).abs() < 1e-12);
        assert!(analyze_advantage(&[], &ids).is_err());
        assert!(analyze_advantage(&[rec("x", 2, 0)], &ids).is_err());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = ExperimentConfig::default()
            .with_overrides(&["n_fusion=12", "sources.1.epochs=3", "target_train.lr=0.5", "fusion.kl.temperature=2.0"])
            .unwrap();
        assert_eq!(c.n_fusion, 12);
        assert_eq!(c.sources[1].epochs, 3);
        assert_eq!(c.sources[0].epochs, ExperimentConfig::default().sources[0].epochs);
        assert_eq!(c.target_train.lr, 0.5);
        assert_eq!(c.fusion.kl.temperature, 2.0);
        assert!(ExperimentConfig::default().with_overrides(&["nope.x=1"]).is_err());
        assert!(ExperimentConfig::default().with_overrides(&["n_fusion"]).is_err());
        assert!(ExperimentConfig::default().with_overrides(&["n_fusion=0"]).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = ExperimentConfig::default();
        let text = c.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
