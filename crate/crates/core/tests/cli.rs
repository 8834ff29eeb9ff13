//! End-to-end runs of the `dail` binary.

use std::path::Path;
use std::process::{Command, Output};

fn dail(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dail"))
        .args(args)
        .env_remove("DAIL_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dail(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_TRAIN: &str = r#"{"data": {"num_instructions": 3}, "train": {"epochs": 2, "batch": 8, "feature_dim": 8, "eval_episodes": 6}}"#;

#[test]
fn gen_data_train_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let stdout = ok(&["gen-data", "--num-instructions", "3", "--n-traj", "24", "--seed", "4", "--out", p(&data)]);
    assert!(stdout.contains("n_traj=24"), "{stdout}");
    let again = dir.path().join("d2.jsonl");
    ok(&["gen-data", "--num-instructions", "3", "--n-traj", "24", "--seed", "4", "--out", p(&again)]);
    assert_eq!(std::fs::read(&data).unwrap(), std::fs::read(&again).unwrap());

    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, SMALL_TRAIN).unwrap();
    let run1 = dir.path().join("run1");
    let run2 = dir.path().join("run2");
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run1)]);
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run2)]);
    for f in ["metrics.csv", "model.ckpt", "target.ckpt", "agent.json"] {
        assert_eq!(
            std::fs::read(run1.join(f)).unwrap(),
            std::fs::read(run2.join(f)).unwrap(),
            "{f} differs between identical runs"
        );
    }
    let metrics = std::fs::read_to_string(run1.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.starts_with("epoch,l_dist,l_c,l_cql,l_tot,eval_success_rate"));

    let stdout = ok(&["eval", "--run", p(&run1), "--episodes", "6"]);
    assert!(stdout.starts_with("success_rate="), "{stdout}");

    ok(&["analyze", "--run", p(&run1), "--mode", "disambiguation", "--n-states", "5"]);
    let table = std::fs::read_to_string(run1.join("disambiguation.csv")).unwrap();
    assert_eq!(table.lines().count(), 2 + 9);
    ok(&["analyze", "--run", p(&run1), "--mode", "embeddings"]);
    let stdout = ok(&["analyze", "--run", p(&run1), "--mode", "silhouette"]);
    assert!(stdout.starts_with("silhouette="), "{stdout}");
}

#[test]
fn seed_env_var_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    ok(&["gen-data", "--num-instructions", "3", "--n-traj", "12", "--out", p(&data)]);
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, SMALL_TRAIN).unwrap();
    let mut runs = Vec::new();
    for (name, seed) in [("a", "0"), ("b", "5")] {
        let out = dir.path().join(name);
        let st = Command::new(env!("CARGO_BIN_EXE_dail"))
            .args(["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)])
            .env("DAIL_SEED", seed)
            .output()
            .unwrap();
        assert!(st.status.success());
        runs.push(std::fs::read(out.join("model.ckpt")).unwrap());
    }
    assert_ne!(runs[0], runs[1]);
}

#[test]
fn mismatched_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    ok(&["gen-data", "--num-instructions", "4", "--n-traj", "8", "--out", p(&data)]);
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, SMALL_TRAIN).unwrap();
    let out = dail(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("instructions"));
}

#[test]
fn silhouette_needs_two_instructions() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    ok(&["gen-data", "--num-instructions", "1", "--n-traj", "8", "--expert", "--out", p(&data)]);
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"train": {"epochs": 1, "batch": 8, "feature_dim": 8, "eval_episodes": 0}}"#).unwrap();
    let run = dir.path().join("r");
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    let out = dail(&["analyze", "--run", p(&run), "--mode", "silhouette"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_and_input_errors_have_distinct_codes() {
    assert_eq!(dail(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(dail(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dail(&["analyze", "--mode", "nonsense"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(dail(&["train", "--data", p(&missing)]).status.code(), Some(1));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"learning_rate": 1}}"#).unwrap();
    assert_eq!(dail(&["train", "--config", p(&bad), "--data", p(&missing)]).status.code(), Some(1));
    assert_eq!(dail(&["gen-data", "--num-instructions", "2", "--success-ratio", "2", "--out", p(&dir.path().join("x"))]).status.code(), Some(1));
    assert_eq!(dail(&["analyze", "--mode", "silhouette"]).status.code(), Some(1));
}

#[test]
fn mc_theorem_mode_prints_both_rates() {
    let stdout = ok(&["analyze", "--mode", "mc-theorem", "--n", "100", "--trials", "200"]);
    let rates: Vec<f64> = stdout.lines().map(|l| l.split('=').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(rates.len(), 2);
    assert!(rates[0] >= 0.95 && rates[1] <= 0.05, "{stdout}");
}

#[test]
fn sweep_resume_skips_finished_cells() {
    let dir = tempfile::tempdir().unwrap();
    let settings = dir.path().join("s.json");
    std::fs::write(
        &settings,
        r#"{"train": {"batch": 16, "feature_dim": 8}, "steps": 2, "eval_episodes": 4}"#,
    )
    .unwrap();
    let out = dir.path().join("sw");
    let base = ["sweep", "--counts", "1,2", "--seeds", "0", "--jobs", "1", "--settings", p(&settings), "--out", p(&out)];
    ok(&base);
    let csv = out.join("sweep.csv");
    let table = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(table.lines().count(), 1 + 4);
    assert!(out.join("plot.svg").exists());

    // mark one finished row with a sentinel value; a resumed sweep must keep it
    let edited = table.replacen("1,baseline,0,", "1,baseline,0,0.123456,ok\n#", 1);
    let edited: String = edited
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(&csv, &edited).unwrap();
    let mut resumed = base.to_vec();
    resumed.push("--resume");
    ok(&resumed);
    let after = std::fs::read_to_string(&csv).unwrap();
    assert!(after.contains("1,baseline,0,0.123456,ok"), "{after}");
    assert_eq!(after.lines().count(), 1 + 4);

    let plot = dir.path().join("again.svg");
    ok(&["plot", "--sweep", p(&csv), "--out", p(&plot)]);
    assert_eq!(std::fs::read(&plot).unwrap(), std::fs::read(out.join("plot.svg")).unwrap());
}
