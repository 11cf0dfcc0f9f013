use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fusion_lab::advantage::{build_advantage_records, write_advantage_report, RewardScorer, SourceModel};
use fusion_lab::align::{build_alignment_map, FallbackPolicy};
use fusion_lab::corpus::{load_dataset, sample_subset, synthesize_dataset, write_dataset, DatasetFormat, SyntheticTaskSpec, TaskKind};
use fusion_lab::distillstore::{preprocess, read_snapshots, write_snapshots, Mode, SnapshotFilter, SnapshotHeader, SnapshotStore, SparsifyParams};
use fusion_lab::harness::{
    analyze_advantage, build_scorers, stage_seed, compare_strategies, default_threads, evaluate, train_source_models, Comparison,
    EvalReport, EvalSuite, ExperimentConfig, ScorerKind, StrategyName,
};
use fusion_lab::tinylm::{load_checkpoint, save_checkpoint, TokenizerKind, TokenizerSpec};
use fusion_lab::{Error, Result};

#[derive(Parser)]
#[command(name = "fusion-lab", version, about = "Progressive multi-source knowledge fusion at desk scale")]
struct Cli {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set n_fusion=200`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize or subsample instruction datasets.
    #[command(subcommand)]
    Data(DataCmd),
    /// Inspect cross-tokenizer vocabulary maps.
    #[command(subcommand)]
    Align(AlignCmd),
    /// Train the configured source models and save checkpoints.
    PretrainSources {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Capture sparse teacher distributions for a dataset.
    Preprocess(PreprocessArgs),
    /// Resolve per-example winners in both advantage modes.
    Advantage(AdvantageArgs),
    /// Run one strategy over one or more seeds.
    Run {
        #[arg(long)]
        strategy: StrategyName,
        #[arg(long, default_value = "0", value_parser = parse_seeds)]
        seeds: Seeds,
        #[arg(long)]
        threads: Option<usize>,
        /// Where to write the JSON reports.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several strategies over the same seeds and tabulate them.
    Compare {
        #[arg(long, value_delimiter = ',', required = true)]
        strategies: Vec<StrategyName>,
        #[arg(long, default_value = "0..10", value_parser = parse_seeds)]
        seeds: Seeds,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a saved run or comparison.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::MarkdownTable)]
        format: ReportFormat,
    },
    /// Print the resolved config as TOML.
    Config,
}

#[derive(Subcommand)]
enum DataCmd {
    Synth {
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        alphabet: Option<usize>,
        #[arg(long)]
        min_len: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    Sample {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum AlignCmd {
    Inspect {
        #[arg(long)]
        src_tok: TokenizerKind,
        #[arg(long)]
        tgt_tok: TokenizerKind,
        #[arg(long)]
        alphabet: Option<usize>,
        #[arg(long, value_enum, default_value_t = Policy::LongestCommonPrefix)]
        policy: Policy,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    LongestCommonPrefix,
    Drop,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    MarkdownTable,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Source checkpoints; each model id is the file stem.
    #[arg(long, value_delimiter = ',', required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "train,infer")]
    modes: Vec<Mode>,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    #[arg(long, default_value_t = 0.95)]
    top_p: f64,
    #[arg(long, default_value_t = 2.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AdvantageArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    models: Vec<PathBuf>,
    /// Snapshot file from `preprocess`; generated in memory when absent.
    #[arg(long)]
    snapshots: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    scorers: Option<Vec<ScorerKind>>,
    /// Model whose embeddings and likelihoods the scorers use. Defaults to
    /// the first of `--models`.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone)]
struct Seeds(Vec<u64>);

/// Accepts `3`, `0,2,5` or a half-open range `0..10`.
fn parse_seeds(s: &str) -> std::result::Result<Seeds, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.parse().map_err(|e| format!("{e}"))?;
        let b: u64 = b.parse().map_err(|e| format!("{e}"))?;
        if a >= b {
            return Err(format!("empty seed range {s}"));
        }
        return Ok(Seeds((a..b).collect()));
    }
    s.split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|e| format!("{e}")))
        .collect::<std::result::Result<_, _>>()
        .map(Seeds)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    base.with_overrides(&cli.overrides)
}

fn load_sources(paths: &[PathBuf]) -> Result<Vec<SourceModel>> {
    paths
        .iter()
        .map(|p| {
            let id = model_id(p);
            Ok(SourceModel::new(id, load_checkpoint(p)?))
        })
        .collect()
}

fn model_id(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("model");
    name.split('.').next().unwrap_or(name).to_string()
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_comparison(path: &Path) -> Result<Comparison> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if let Ok(c) = serde_json::from_str::<Comparison>(&text) {
        return Ok(c);
    }
    let reports: Vec<EvalReport> = match serde_json::from_str::<Vec<EvalReport>>(&text) {
        Ok(r) => r,
        Err(_) => vec![serde_json::from_str::<EvalReport>(&text)?],
    };
    comparison_of(reports)
}

fn comparison_of(reports: Vec<EvalReport>) -> Result<Comparison> {
    let mut strategies = Vec::new();
    let mut seeds = Vec::new();
    for r in &reports {
        if !strategies.contains(&r.strategy.name) {
            strategies.push(r.strategy.name);
        }
        if !seeds.contains(&r.seed) {
            seeds.push(r.seed);
        }
    }
    Comparison::from_reports(&strategies, &seeds, reports)
}

/// Writes to stdout, newline-terminated. A closed pipe is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
    if !text.ends_with('\n') {
        let _ = out.write_all(b"\n");
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    match cli.command {
        Command::Config => emit(&config.to_toml()?),
        Command::Data(DataCmd::Synth {
            task,
            n,
            seed,
            alphabet,
            min_len,
            max_len,
            out,
        }) => {
            let spec = SyntheticTaskSpec {
                task_kind: task,
                alphabet_size: alphabet.unwrap_or(config.shape.alphabet_size),
                min_len: min_len.unwrap_or(config.shape.min_len),
                max_len: max_len.unwrap_or(config.shape.max_len),
                seed,
            };
            let data = synthesize_dataset(&spec, n)?;
            write_dataset(&out, &data)?;
            eprintln!("wrote {} examples to {}", data.len(), out.display());
        }
        Command::Data(DataCmd::Sample { data, n, seed, out }) => {
            let all = load_dataset(&data, DatasetFormat::Jsonl)?;
            let picked = sample_subset(&all, n, seed)?;
            write_dataset(&out, &picked)?;
            eprintln!("sampled {} of {} examples into {}", picked.len(), all.len(), out.display());
        }
        Command::Align(AlignCmd::Inspect {
            src_tok,
            tgt_tok,
            alphabet,
            policy,
        }) => {
            let a = alphabet.unwrap_or(config.shape.alphabet_size);
            let policy = match policy {
                Policy::LongestCommonPrefix => FallbackPolicy::LongestCommonPrefix,
                Policy::Drop => FallbackPolicy::Drop,
            };
            let map = build_alignment_map(
                &TokenizerSpec::for_tasks(src_tok, a)?,
                &TokenizerSpec::for_tasks(tgt_tok, a)?,
                policy,
            );
            emit(&serde_json::to_string_pretty(&map.to_json())?);
        }
        Command::PretrainSources { seed, out_dir } => {
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let shape = &config.shape;
            let sources = train_source_models(&config.sources, shape, stage_seed(seed, "sources"))?;
            let suite = EvalSuite::synthesize(
                &config.eval_tasks,
                shape.alphabet_size,
                shape.min_len,
                shape.max_len,
                config.n_eval_per_task,
                stage_seed(seed, "eval"),
            )?;
            for s in &sources {
                let path = out_dir.join(format!("{}.ckpt.json", s.id));
                save_checkpoint(&s.model, &path)?;
                let m = evaluate(&s.model, &suite, config.eval_max_new_tokens)?;
                emit(&format!("{} -> {}  macro {:.3}  {:?}", s.id, path.display(), m.macro_average, m.per_task));
            }
        }
        Command::Preprocess(a) => {
            let sources = load_sources(&a.models)?;
            let data = load_dataset(&a.data, DatasetFormat::Jsonl)?;
            let cfg = fusion_lab::distillstore::PreprocessConfig {
                sparsify: SparsifyParams {
                    top_k: a.top_k,
                    top_p: a.top_p,
                    temperature: a.temperature,
                },
                modes: a.modes,
                seed: a.seed,
                ..config.preprocess.clone()
            };
            let store = preprocess(&data, &sources, &cfg)?;
            let header = SnapshotHeader {
                version: 1,
                vocab_hashes: sources
                    .iter()
                    .map(|s| (s.id.clone(), s.model.tokenizer().vocab_hash()))
                    .collect(),
            };
            let n = write_snapshots(&a.out, store.sorted(), &header)?;
            eprintln!("wrote {n} snapshot records to {}", a.out.display());
        }
        Command::Advantage(a) => {
            let sources = load_sources(&a.models)?;
            let data = load_dataset(&a.data, DatasetFormat::Jsonl)?;
            let store = match &a.snapshots {
                Some(p) => SnapshotStore::from_records(read_snapshots(p, &SnapshotFilter::all())?.1)?,
                None => preprocess(&data, &sources, &config.preprocess)?,
            };
            let target = match &a.target {
                Some(p) => load_checkpoint(p)?,
                None => sources[0].model.clone(),
            };
            let cfg = ExperimentConfig {
                scorers: a.scorers.unwrap_or_else(|| config.scorers.clone()),
                ..config.clone()
            };
            cfg.validate()?;
            let scorers = build_scorers(&cfg, &target);
            let panel: Vec<&dyn RewardScorer> = scorers.iter().map(|b| b.as_ref()).collect();
            let strongest = cfg.strongest_scorer.and_then(|s| cfg.scorers.iter().position(|k| *k == s));
            let records = build_advantage_records(&data, &sources, &panel, strongest, &store, cfg.ce_normalization)?;
            write_advantage_report(&a.out, &records)?;
            let ids: Vec<String> = sources.iter().map(|s| s.id.clone()).collect();
            emit(&serde_json::to_string_pretty(&analyze_advantage(&records, &ids)?)?);
        }
        Command::Run {
            strategy,
            seeds,
            threads,
            out,
        } => {
            let c = compare_strategies(&config, &[strategy], &seeds.0, threads.unwrap_or_else(default_threads))?;
            if let Some(p) = out {
                write_json(&p, &c.reports)?;
            }
            emit(&c.to_markdown());
        }
        Command::Compare {
            strategies,
            seeds,
            threads,
            out,
        } => {
            if strategies.len() < 2 {
                return Err(Error::invalid("compare needs at least two strategies"));
            }
            let c = compare_strategies(&config, &strategies, &seeds.0, threads.unwrap_or_else(default_threads))?;
            if let Some(p) = out {
                write_json(&p, &c)?;
            }
            emit(&c.to_markdown());
        }
        Command::Report { input, format } => {
            let c = load_comparison(&input)?;
            match format {
                ReportFormat::Json => emit(&serde_json::to_string_pretty(&c)?),
                ReportFormat::MarkdownTable => emit(&c.to_markdown()),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
