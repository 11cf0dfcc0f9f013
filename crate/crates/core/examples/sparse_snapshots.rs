//! Truncating teacher distributions and storing them in a snapshot file.
//!
//!     cargo run --example sparse_snapshots

use fusion_lab::distillstore::{
    read_snapshots, sparsify, write_snapshots, Mode, SnapshotFilter, SnapshotHeader, SnapshotRecord, SparsifyParams,
};

fn main() -> fusion_lab::Result<()> {
    let probs = [0.5f64, 0.2, 0.15, 0.1, 0.05];
    let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
    let d = sparsify(&logits, 0.8, 3, 1.0)?;
    println!("top_p 0.8, top_k 3: ids {:?} probs {:?} residual {:.4}", d.token_ids(), d.probs(), d.residual());

    let defaults = SparsifyParams::default();
    let d = defaults.apply(&logits)?;
    println!(
        "top_p {} top_k {} temperature {}: ids {:?} residual {:.4}",
        defaults.top_p, defaults.top_k, defaults.temperature, d.token_ids(), d.residual()
    );

    let records: Vec<SnapshotRecord> = (0..4)
        .map(|i| {
            let shifted: Vec<f64> = logits.iter().enumerate().map(|(k, z)| z + 0.3 * ((k + i) % 3) as f64).collect();
            Ok(SnapshotRecord {
                example_id: format!("ex-{i}"),
                model_id: "teacher".into(),
                mode: if i % 2 == 0 { Mode::Train } else { Mode::Infer },
                response_token_ids: vec![1, 2],
                rows: vec![defaults.apply(&shifted)?, defaults.apply(&logits)?],
            })
        })
        .collect::<fusion_lab::Result<_>>()?;

    let dir = std::env::temp_dir().join(format!("fusion-lab-snapshots-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| fusion_lab::Error::io(&dir, e))?;
    let path = dir.join("demo.snap");
    let n = write_snapshots(&path, &records, &SnapshotHeader { version: 1, ..Default::default() })?;
    let (_, back) = read_snapshots(&path, &SnapshotFilter::mode(Mode::Infer))?;
    println!("wrote {n} records, read back {} inference records", back.len());
    let worst = back
        .iter()
        .flat_map(|r| {
            let orig = records.iter().find(|o| o.key() == r.key()).unwrap();
            orig.rows.iter().zip(&r.rows).flat_map(|(a, b)| a.probs().iter().zip(b.probs()).map(|(x, y)| (x - y).abs()))
        })
        .fold(0.0, f64::max);
    println!("largest probability drift after round trip: {worst:.2e}");
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
