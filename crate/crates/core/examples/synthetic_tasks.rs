//! Synthetic instruction tasks with checkable answers, plus the
//! difficulty split used by the curricula.
//!
//!     cargo run --example synthetic_tasks

use fusion_lab::corpus::{
    solve_instruction, split_by_difficulty, synthesize_dataset, synthesize_mixture, DifficultyCriterion,
    SyntheticTaskSpec, TaskKind,
};

fn main() -> fusion_lab::Result<()> {
    for kind in TaskKind::ALL {
        let spec = SyntheticTaskSpec {
            task_kind: kind,
            alphabet_size: 5,
            min_len: 1,
            max_len: 4,
            seed: 7,
        };
        let ex = &synthesize_dataset(&spec, 1)?[0];
        println!("{:<8} {:<22} -> {}", kind.name(), ex.instruction, ex.response);
    }

    let mix = [(TaskKind::Modsum, 0.8), (TaskKind::Copy, 0.2)];
    let data = synthesize_mixture(&mix, 5, 1, 4, 200, 1, "demo")?;
    let modsum = data.iter().filter(|e| e.instruction.starts_with("MODSUM")).count();
    println!("\n80/20 mixture of 200: {modsum} MODSUM");
    assert!(data.iter().all(|e| solve_instruction(&e.instruction, 5).as_deref() == Some(e.response.as_str())));

    let all: Vec<_> = TaskKind::ALL.iter().map(|&k| (k, 1.0)).collect();
    let data = synthesize_mixture(&all, 5, 1, 4, 200, 2, "split")?;
    let (easy, hard) = split_by_difficulty(&data, DifficultyCriterion::GtLength, None, None)?;
    let longest_easy = easy.iter().map(|e| e.response.len()).max().unwrap_or(0);
    let shortest_hard = hard.iter().map(|e| e.response.len()).min().unwrap_or(0);
    println!("median split by answer length: {} easy (<= {longest_easy} chars), {} hard (>= {shortest_hard} chars)", easy.len(), hard.len());
    Ok(())
}
