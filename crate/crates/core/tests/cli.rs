use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"{
    "dataset": {"train_size": 64, "test_size": 32},
    "pretrain": {"batch_size": 32, "warmup_epochs": 1},
    "finetune": {"batch_size": 32, "warmup_epochs": 1, "eval_batch_size": 32},
    "probe": {"batch_size": 32, "warmup_epochs": 1, "eval_batch_size": 32},
    "analyze": {"num_images": 32, "batch_size": 16}
}"#;

fn vitlite(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vitlite"))
        .args(args)
        .env("VITLITE_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = vitlite(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, CONFIG).unwrap();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pretrain(cfg: &Path, out: &Path, seed: &str) {
    ok(&["pretrain", "--config", s(cfg), "--out", s(out), "--epochs", "1", "--seed", seed]);
}

#[test]
fn pretrain_writes_a_checkpoint_and_one_row_per_epoch() {
    let (dir, cfg) = setup();
    let out = dir.path().join("pre");
    pretrain(&cfg, &out, "0");
    assert!(out.join("final.ckpt").is_file());
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,split,lr,loss,top1,top5");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("1,train,"));
}

#[test]
fn surgery_then_finetune_then_analysis() {
    let (dir, cfg) = setup();
    let pre = dir.path().join("pre");
    pretrain(&cfg, &pre, "0");
    let cut = dir.path().join("cut");
    ok(&["surgery", "--config", s(&cfg), "--out", s(&cut), "--init", s(&pre.join("final.ckpt")), "--keep", "2"]);
    assert!(cut.join("final.ckpt").is_file());

    let ft = dir.path().join("ft");
    ok(&["finetune", "--config", s(&cfg), "--out", s(&ft), "--init", s(&cut.join("final.ckpt")), "--epochs", "1"]);
    let metrics = std::fs::read_to_string(ft.join("metrics.csv")).unwrap();
    assert!(metrics.lines().any(|l| l.starts_with("1,test,")));

    let an = dir.path().join("an");
    let a = pre.join("final.ckpt");
    let b = ft.join("final.ckpt");
    ok(&["analyze", "--config", s(&cfg), "--out", s(&an), "--a", s(&a), "--b", s(&b), "--kind", "rep"]);
    let csv = std::fs::read_to_string(an.join("heatmap_rep.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    // desk depth 4: embedding plus four blocks on each side, plus labels
    assert_eq!(rows.len(), 1 + 5);
    assert!(rows.iter().all(|r| r.len() == 1 + 5));
    let pgm = std::fs::read(an.join("heatmap_rep.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n80 80\n255\n"));

    ok(&["analyze", "--config", s(&cfg), "--out", s(&an), "--a", s(&a), "--b", s(&a), "--kind", "stats"]);
    assert!(an.join("attn_stats_a.csv").is_file());
}

#[test]
fn missing_input_is_a_usage_error_and_writes_nothing() {
    let (dir, cfg) = setup();
    let out = dir.path().join("ft");
    let missing = dir.path().join("nope.ckpt");
    let r = vitlite(&["finetune", "--config", s(&cfg), "--out", s(&out), "--init", s(&missing)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.join("final.ckpt").exists());

    let r = vitlite(&["analyze", "--config", s(&cfg), "--out", s(&out), "--a", s(&missing)]);
    assert_eq!(r.status.code(), Some(2));

    let r = vitlite(&["pretrain", "--config", s(&dir.path().join("absent.json"))]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn invalid_config_is_reported_by_field() {
    let (dir, _) = setup();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"pretrain": {"mask_ratio": 1.5}}"#).unwrap();
    let r = vitlite(&["pretrain", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("pretrain.mask_ratio"));
}

#[test]
fn identical_runs_write_identical_metrics() {
    let (dir, cfg) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pretrain(&cfg, &a, "3");
    pretrain(&cfg, &b, "3");
    assert_eq!(std::fs::read(a.join("metrics.csv")).unwrap(), std::fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("final.ckpt")).unwrap(), std::fs::read(b.join("final.ckpt")).unwrap());
}
