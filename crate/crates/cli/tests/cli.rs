use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
name = "cli"
preset = "base_kd+cscct"
seeds = [0]

[dataset]
kind = "csv"
path = "data.csv"
label_column = "label"

[protocol]
variant = "equal"
per_task_classes = 1

[model]
hidden_widths = [6]
feature_dim = 3

[train]
epochs = 2
batch_size = 8
lr_decay_milestones = []
memory_per_class = 2
"#;

fn cscct(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cscct"))
        .args(args)
        .current_dir(dir)
        .env_remove("CSCCT_OUTPUT_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn workspace() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let mut csv = String::from("label,x,y\n");
    for i in 0..10 {
        let v = i as f64 * 0.1;
        csv.push_str(&format!("10,{v},{}\n20,{},{v}\n", 1.0 + v, -1.0 - v));
    }
    std::fs::write(tmp.path().join("data.csv"), csv).unwrap();
    std::fs::write(tmp.path().join("run.toml"), CONFIG).unwrap();
    tmp
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_then_refuse_then_force() {
    let ws = workspace();
    let o = cscct(&["run", "run.toml", "--out", "out"], ws.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("seed 0: avg_inc_acc"));
    assert!(ws.path().join("out/summary.json").exists());
    assert!(ws.path().join("out/seed_0/checkpoint_phase2.bin").exists());

    let o = cscct(&["run", "run.toml", "--out", "out"], ws.path());
    assert_eq!(o.status.code(), Some(2));
    let o = cscct(&["run", "run.toml", "--out", "out", "--force", "--seed-override", "7", "--emit-embeddings"], ws.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ws.path().join("out/seed_7/embeddings_phase2.csv").exists());
    assert!(!ws.path().join("out/seed_0").exists());
}

#[test]
fn output_root_from_environment() {
    let ws = workspace();
    let o = Command::new(env!("CARGO_BIN_EXE_cscct"))
        .args(["run", "run.toml"])
        .current_dir(ws.path())
        .env("CSCCT_OUTPUT_ROOT", ws.path().join("runs_here"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ws.path().join("runs_here/cli/summary.json").exists());
}

#[test]
fn compare_prints_and_writes_a_table() {
    let ws = workspace();
    for (out, preset) in [("a", "base_kd"), ("b", "base_kd+cscct")] {
        std::fs::write(ws.path().join(format!("{out}.toml")), CONFIG.replace("base_kd+cscct", preset)).unwrap();
        let o = cscct(&["run", &format!("{out}.toml"), "--out", out], ws.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = cscct(&["compare", "a/summary.json", "b/summary.json", "--csv", "table.csv"], ws.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains("base_kd+cscct"));
    let csv = std::fs::read_to_string(ws.path().join("table.csv")).unwrap();
    assert!(csv.starts_with("run,preset,average_incremental_accuracy_mean"));
    assert_eq!(csv.lines().count(), 3);

    let o = cscct(&["compare", "a/summary.json"], ws.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn export_embeddings_from_a_checkpoint() {
    let ws = workspace();
    assert!(cscct(&["run", "run.toml", "--out", "out"], ws.path()).status.success());
    let o = cscct(
        &["export-embeddings", "out/seed_0/checkpoint_phase2.bin", "data.csv", "--out", "emb.csv"],
        ws.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let emb = std::fs::read_to_string(ws.path().join("emb.csv")).unwrap();
    let mut lines = emb.lines();
    assert_eq!(lines.next(), Some("id,label,phase,f0,f1,f2"));
    assert_eq!(lines.count(), 20);

    let o = cscct(
        &["export-embeddings", "out/seed_0/checkpoint_phase2.bin", "data.csv", "--feature-columns", "x"],
        ws.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("expects 2"), "{}", stderr(&o));
}

#[test]
fn invalid_config_exits_nonzero_naming_the_field() {
    let ws = workspace();
    std::fs::write(ws.path().join("bad.toml"), CONFIG.replace("epochs = 2", "epochs = 0")).unwrap();
    let o = cscct(&["run", "bad.toml", "--out", "out"], ws.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.epochs"), "{}", stderr(&o));
    assert!(!ws.path().join("out").exists());
}

#[test]
fn failed_seed_exits_with_one() {
    let ws = workspace();
    std::fs::write(
        ws.path().join("diverge.toml"),
        CONFIG.replace("batch_size = 8", "batch_size = 8\nlearning_rate = 1e154"),
    )
    .unwrap();
    let o = cscct(&["run", "diverge.toml", "--out", "out"], ws.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stdout(&o).contains("FAILED"));
    assert!(ws.path().join("out/summary.json").exists());
}
