use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fusion-lab"))
}

fn ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn data_and_config_commands() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let sub = dir.path().join("s.jsonl");
    ok(bin().args(["data", "synth", "--task", "sort", "--n", "9", "--seed", "4", "--out"]).arg(&data));
    assert_eq!(std::fs::read_to_string(&data).unwrap().lines().count(), 9);
    ok(bin().args(["data", "sample", "--n", "3", "--seed", "1", "--data"]).arg(&data).arg("--out").arg(&sub));
    assert_eq!(std::fs::read_to_string(&sub).unwrap().lines().count(), 3);

    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, "n_fusion = 33\n").unwrap();
    let shown = ok(bin().arg("--config").arg(&cfg).args(["--set", "n_eval_per_task=7", "config"]));
    assert!(shown.contains("n_fusion = 33"));
    assert!(shown.contains("n_eval_per_task = 7"));

    let map = ok(bin().args(["align", "inspect", "--src-tok", "greedy-merge", "--tgt-tok", "char"]));
    let v: serde_json::Value = serde_json::from_str(&map).unwrap();
    assert!(v["entries"].as_array().unwrap().iter().any(|e| e["kind"] == "fallback"));

    let bad = bin().args(["--set", "nope=1", "config"]).output().unwrap();
    assert!(!bad.status.success());
}

#[test]
fn pipeline_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s);
    let small = [
        "--set", "sources.0.n_train=60", "--set", "sources.1.n_train=60", "--set", "sources.0.epochs=2",
        "--set", "sources.1.epochs=2", "--set", "n_fusion=16", "--set", "n_eval_per_task=4",
    ];
    ok(bin().args(small).args(["pretrain-sources", "--seed", "1", "--out-dir"]).arg(p("m")));
    let models = format!("{},{}", p("m/reverse-merge.ckpt.json").display(), p("m/modsum-char.ckpt.json").display());
    ok(bin().args(["data", "synth", "--task", "copy", "--n", "6", "--out"]).arg(p("d.jsonl")));
    ok(bin().args(["preprocess", "--models", &models, "--modes", "train,infer", "--data"]).arg(p("d.jsonl")).arg("--out").arg(p("s.snap")));
    let summary = ok(bin()
        .args(["advantage", "--models", &models, "--scorers", "correctness,loglik", "--data"])
        .arg(p("d.jsonl"))
        .arg("--snapshots")
        .arg(p("s.snap"))
        .arg("--out")
        .arg(p("adv.jsonl")));
    assert!(summary.contains("train_fraction"));
    assert_eq!(std::fs::read_to_string(p("adv.jsonl")).unwrap().lines().count(), 6);

    ok(bin().args(small).args(["compare", "--strategies", "csft,profuser", "--seeds", "0..2", "--out"]).arg(p("c.json")));
    let table = ok(bin().args(["report", "--format", "markdown-table", "--input"]).arg(p("c.json")));
    assert!(table.contains("| ProFuser | 1 |"));
    let json = ok(bin().args(["report", "--format", "json", "--input"]).arg(p("c.json")));
    assert!(json.contains("\"pairwise\""));

    ok(bin().args(small).args(["run", "--strategy", "train-fuse", "--seeds", "3", "--out"]).arg(p("r.json")));
    assert!(ok(bin().args(["report", "--input"]).arg(p("r.json"))).contains("TrainFuse"));
}
