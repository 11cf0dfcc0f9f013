//! Instruction datasets: JSONL ingestion, seeded subsampling, synthetic
//! tasks with checkable answers, and difficulty splits for curricula.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::{RewardScorer, ScoreContext};
use crate::error::{Error, Result};
use crate::tinylm::{DecodingParams, TinyLM};

/// One (instruction, response) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    #[serde(default)]
    pub system: String,
    pub instruction: String,
    pub response: String,
}

impl Example {
    pub fn new(id: impl Into<String>, instruction: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            system: String::new(),
            instruction: instruction.into(),
            response: response.into(),
        }
    }

    pub fn score_context(&self) -> ScoreContext<'_> {
        ScoreContext {
            system: &self.system,
            instruction: &self.instruction,
            reference: Some(&self.response),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Jsonl,
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    #[serde(default)]
    system: Option<String>,
    instruction: Option<String>,
    response: Option<String>,
}

/// Reads a dataset in file order. A missing `id` defaults to the 1-based
/// line number; a missing `system` defaults to the empty string.
pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let DatasetFormat::Jsonl = format;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::MalformedLine {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let instruction = raw
            .instruction
            .filter(|s| !s.is_empty())
            .ok_or_else(|| bad("missing or empty `instruction`".into()))?;
        let response = raw
            .response
            .filter(|s| !s.is_empty())
            .ok_or_else(|| bad("missing or empty `response`".into()))?;
        let id = raw.id.unwrap_or_else(|| lineno.to_string());
        if !seen.insert(id.clone()) {
            return Err(bad(format!("duplicate id `{id}`")));
        }
        out.push(Example {
            id,
            system: raw.system.unwrap_or_default(),
            instruction,
            response,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Uniform sample without replacement; the result keeps the input's
/// relative order.
pub fn sample_subset(dataset: &[Example], n: usize, seed: u64) -> Result<Vec<Example>> {
    if n > dataset.len() {
        return Err(Error::invalid(format!(
            "cannot sample {n} examples from a dataset of {}",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, dataset.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| dataset[i].clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskKind {
    Copy,
    Reverse,
    Modsum,
    Sort,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Copy, TaskKind::Reverse, TaskKind::Modsum, TaskKind::Sort];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "COPY",
            TaskKind::Reverse => "REVERSE",
            TaskKind::Modsum => "MODSUM",
            TaskKind::Sort => "SORT",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown task kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub task_kind: TaskKind,
    pub alphabet_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet_size < 2 || self.alphabet_size > 26 {
            return Err(Error::invalid("alphabet_size must be in 2..=26"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid("need 1 <= min_len <= max_len"));
        }
        Ok(())
    }
}

/// The `i`-th lowercase letter.
pub fn symbol(index: usize) -> char {
    (b'a' + index as u8) as char
}

pub fn symbol_index(c: char) -> Option<usize> {
    c.is_ascii_lowercase().then(|| (c as u8 - b'a') as usize)
}

/// Marks the end of the input so the response start is unambiguous.
pub const INPUT_END: &str = " =";

pub fn render_instruction(kind: TaskKind, input: &str) -> String {
    format!("{} : {input}{INPUT_END}", kind.name())
}

/// Splits `"<KIND> : <input> ="` back into its parts. The end marker is
/// optional.
pub fn parse_instruction(instruction: &str) -> Option<(TaskKind, &str)> {
    let (kind, input) = instruction.split_once(" : ")?;
    let input = input.strip_suffix(INPUT_END).unwrap_or(input);
    Some((kind.parse().ok()?, input))
}

/// Computes the exact answer for a synthetic task input. Returns `None`
/// when the input contains symbols outside the alphabet.
pub fn solve(kind: TaskKind, input: &str, alphabet_size: usize) -> Option<String> {
    let idx: Vec<usize> = input
        .chars()
        .map(|c| symbol_index(c).filter(|&i| i < alphabet_size))
        .collect::<Option<_>>()?;
    Some(match kind {
        TaskKind::Copy => input.to_string(),
        TaskKind::Reverse => input.chars().rev().collect(),
        TaskKind::Modsum => symbol(idx.iter().sum::<usize>() % alphabet_size).to_string(),
        TaskKind::Sort => {
            let mut s = idx;
            s.sort_unstable();
            s.into_iter().map(symbol).collect()
        }
    })
}

/// Answer for a rendered instruction, if it parses as a synthetic task.
pub fn solve_instruction(instruction: &str, alphabet_size: usize) -> Option<String> {
    let (kind, input) = parse_instruction(instruction)?;
    if input.is_empty() {
        return None;
    }
    solve(kind, input, alphabet_size)
}

pub fn synthesize_dataset(spec: &SyntheticTaskSpec, n: usize) -> Result<Vec<Example>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prefix = spec.task_kind.name().to_ascii_lowercase();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let input: String = (0..len)
            .map(|_| symbol(rng.gen_range(0..spec.alphabet_size)))
            .collect();
        let response = solve(spec.task_kind, &input, spec.alphabet_size).expect("input drawn from alphabet");
        out.push(Example {
            id: format!("{prefix}-{}-{i}", spec.seed),
            system: String::new(),
            instruction: render_instruction(spec.task_kind, &input),
            response,
        });
    }
    Ok(out)
}

/// Draws `n` examples from a weighted mixture of task kinds. Ids are
/// prefixed with `tag` so several mixtures can share one dataset.
pub fn synthesize_mixture(
    mixture: &[(TaskKind, f64)],
    alphabet_size: usize,
    min_len: usize,
    max_len: usize,
    n: usize,
    seed: u64,
    tag: &str,
) -> Result<Vec<Example>> {
    let total: f64 = mixture.iter().map(|(_, w)| w).sum();
    if mixture.is_empty() || !(total > 0.0) {
        return Err(Error::invalid("mixture weights must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut u = rng.gen::<f64>() * total;
        let mut kind = mixture[mixture.len() - 1].0;
        for &(k, w) in mixture {
            if u < w {
                kind = k;
                break;
            }
            u -= w;
        }
        let spec = SyntheticTaskSpec {
            task_kind: kind,
            alphabet_size,
            min_len,
            max_len,
            seed: rng.gen(),
        };
        let mut ex = synthesize_dataset(&spec, 1)?.pop().expect("one example");
        ex.id = format!("{tag}-{i}");
        out.push(ex);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyCriterion {
    GtLength,
    RmScore,
}

/// Median split into (easy, hard). Both halves keep the input order.
pub fn split_by_difficulty(
    dataset: &[Example],
    criterion: DifficultyCriterion,
    scorer: Option<&dyn RewardScorer>,
    target_model: Option<&TinyLM>,
) -> Result<(Vec<Example>, Vec<Example>)> {
    let difficulty: Vec<f64> = match criterion {
        DifficultyCriterion::GtLength => dataset.iter().map(|e| e.response.chars().count() as f64).collect(),
        DifficultyCriterion::RmScore => {
            let (Some(scorer), Some(model)) = (scorer, target_model) else {
                return Err(Error::invalid("rm_score split needs both a scorer and a target model"));
            };
            let params = DecodingParams::greedy(32);
            dataset
                .iter()
                .map(|e| {
                    let x = model.tokenizer().encode(&e.instruction);
                    let out = model.generate(&x, &params);
                    let text = model.tokenizer().decode(&out);
                    -scorer.score(&e.score_context(), &text)
                })
                .collect()
        }
    };
    Ok(median_split(dataset, &difficulty))
}

/// Stable median split: the ⌈n/2⌉ least difficult go to the easy side.
pub fn median_split(dataset: &[Example], difficulty: &[f64]) -> (Vec<Example>, Vec<Example>) {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|&a, &b| difficulty[a].total_cmp(&difficulty[b]));
    let n_easy = dataset.len().div_ceil(2);
    let mut easy_mask = vec![false; dataset.len()];
    for &i in &order[..n_easy] {
        easy_mask[i] = true;
    }
    let (easy, hard): (Vec<_>, Vec<_>) = dataset.iter().zip(&easy_mask).partition(|(_, &m)| m);
    (
        easy.into_iter().map(|(e, _)| e.clone()).collect(),
        hard.into_iter().map(|(e, _)| e.clone()).collect(),
    )
}
