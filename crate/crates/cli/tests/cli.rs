use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use p3sgd_core::patientdb::load_csv;

fn p3sgd() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_p3sgd"));
    cmd.env_remove("P3SGD_OUTPUT_ROOT");
    cmd
}

fn run(args: &[&str]) -> Output {
    p3sgd().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path, out: &str, extra: &str) -> PathBuf {
    let text = format!(
        "seed = 5\noutput_dir = {:?}\n\
         [model]\nkind = \"mlp\"\nhidden_dim = 4\n\
         [data.synthetic]\nn_patients = 60\nper_patient = 8\ndim = 4\nclass_sep = 3.0\n\
         [train]\nrounds = 8\nsampling_ratio = 0.5\ncheckpoint_every = 4\nsgd_steps = 40\n\
         [attack]\nsteps = 30\nn_train = 5\nn_test = 5\n{extra}",
        dir.join(out)
    );
    let path = dir.join(format!("{out}.toml"));
    fs::write(&path, text).unwrap();
    path
}

fn train(config: &Path, sets: &[&str]) -> Output {
    let mut cmd = p3sgd();
    cmd.arg("train").arg(config);
    for s in sets {
        cmd.args(["--set", s]);
    }
    cmd.output().unwrap()
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn parse_field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse::<f64>().unwrap()))
        .unwrap_or_else(|| panic!("no `{key}` in {text}"))
}

#[test]
fn p3sgd_run_writes_all_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "run", "");
    let o = train(&cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = tmp.path().join("run");
    for f in [
        "config.toml",
        "metrics.jsonl",
        "summary.json",
        "final.ckpt",
        "checkpoints/round-000004.ckpt",
        "checkpoints/round-000008.ckpt",
    ] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let s = summary(&dir);
    assert!(s["epsilon"].as_f64().unwrap() > 0.0);
    assert!(s["delta"].as_f64().unwrap() > 0.0);
    assert_eq!(s["strategy"], "p3sgd");

    let v = run(&["validate-metrics", dir.join("metrics.jsonl").to_str().unwrap()]);
    assert!(v.status.success(), "{}", stderr(&v));
    assert!(stdout(&v).contains("8 round"), "{}", stdout(&v));

    // Every round record carries the loss curve values.
    let metrics = fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    let rounds: Vec<serde_json::Value> = metrics
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|r| r["kind"] == "round")
        .collect();
    assert!(rounds
        .iter()
        .all(|r| r["train_loss"].is_number() && r["test_loss"].is_number()));
}

#[test]
fn baseline_summary_has_no_privacy_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "sgd", "");
    let o = train(&cfg, &["train.strategy=sgd", "train.eval_every=10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = summary(&tmp.path().join("sgd"));
    assert_eq!(s["strategy"], "sgd");
    assert!(s.get("epsilon").is_none() && s.get("delta").is_none());
    let v = run(&[
        "validate-metrics",
        tmp.path().join("sgd/metrics.jsonl").to_str().unwrap(),
    ]);
    assert!(v.status.success(), "{}", stderr(&v));
}

#[test]
fn reruns_reproduce_summary_and_checkpoint_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "a", "");
    assert!(train(&cfg, &[]).status.success());
    let first_summary = fs::read(tmp.path().join("a/summary.json")).unwrap();
    let first_ckpt = fs::read(tmp.path().join("a/final.ckpt")).unwrap();
    assert!(train(&cfg, &[]).status.success());
    assert_eq!(fs::read(tmp.path().join("a/summary.json")).unwrap(), first_summary);
    assert_eq!(fs::read(tmp.path().join("a/final.ckpt")).unwrap(), first_ckpt);
}

#[test]
fn output_root_env_reroots_relative_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("rel.toml");
    fs::write(
        &cfg,
        "output_dir = \"nested/run\"\n[data.synthetic]\nn_patients = 20\nper_patient = 4\ndim = 3\nclass_sep = 2.0\n[train]\nrounds = 2\n",
    )
    .unwrap();
    let o = p3sgd()
        .env("P3SGD_OUTPUT_ROOT", tmp.path())
        .args(["train", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("nested/run/summary.json").exists());
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "bad", "");
    let o = train(&cfg, &["train.roundz=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("roundz"), "{}", stderr(&o));

    let o = train(&cfg, &["train.update_bound=-1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("update_bound"), "{}", stderr(&o));

    assert_eq!(run(&["train", "/nonexistent/config.toml"]).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "csv", "");
    let o = train(&cfg, &["data.synthetic.n_patients=0"]);
    assert_eq!(o.status.code(), Some(1));

    let bad = tmp.path().join("broken.jsonl");
    fs::write(&bad, "{\"kind\":\"round\"}\n").unwrap();
    let o = run(&["validate-metrics", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn accountant_examples() {
    let o = run(&[
        "accountant",
        "--q",
        "0.1",
        "--z",
        "3.0",
        "--rounds",
        "100",
        "--delta",
        "5e-4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let eps = parse_field(&stdout(&o), "epsilon");
    assert!((eps - 4.70).abs() <= 0.15 * 4.70, "epsilon {eps}");
    assert!(stdout(&o).contains("lambda"));

    let o = run(&[
        "accountant",
        "--q",
        "0.1",
        "--z",
        "1.0",
        "--rounds",
        "0",
        "--delta",
        "5e-4",
    ]);
    let eps = parse_field(&stdout(&o), "epsilon");
    assert!((eps - (1.0f64 / 5e-4).ln() / 32.0).abs() < 1e-6);

    let o = run(&["accountant", "--q", "0.1", "--noise-scales", "3,1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--trace"), "{}", stderr(&o));
}

#[test]
fn constant_trace_matches_fixed_scale() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = tmp.path().join("trace.txt");
    fs::write(&trace, "2.0\n".repeat(100)).unwrap();
    let adaptive = run(&[
        "accountant",
        "--q",
        "0.1",
        "--noise-scales",
        "3,2",
        "--trace",
        trace.to_str().unwrap(),
        "--eps-select",
        "0",
        "--delta",
        "5e-4",
    ]);
    let fixed = run(&[
        "accountant",
        "--q",
        "0.1",
        "--z",
        "2.0",
        "--rounds",
        "100",
        "--eps-select",
        "0",
        "--delta",
        "5e-4",
    ]);
    assert!(adaptive.status.success(), "{}", stderr(&adaptive));
    assert_eq!(stdout(&adaptive), stdout(&fixed));
}

#[test]
fn attack_command_report_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "atk", "");
    assert!(train(&cfg, &[]).status.success());
    let ckpt = tmp.path().join("atk/final.ckpt");
    let ck = ckpt.to_str().unwrap();
    let report = tmp.path().join("report.jsonl");

    let o = run(&[
        "attack",
        "--config",
        cfg.to_str().unwrap(),
        "--private",
        ck,
        "--nonprivate",
        ck,
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<serde_json::Value> = fs::read_to_string(&report)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.iter().filter(|r| r["kind"] == "attack").count(), 20);
    let sums: Vec<&serde_json::Value> = rows.iter().filter(|r| r["kind"] == "summary").collect();
    assert_eq!(sums.len(), 4);
    for group in ["train", "test"] {
        let g: Vec<_> = sums.iter().filter(|s| s["group"] == group).collect();
        assert_eq!(g[0]["mean_psnr_db"], g[1]["mean_psnr_db"]);
    }
    assert!(run(&["validate-metrics", report.to_str().unwrap()]).status.success());

    let missing = tmp.path().join("missing.ckpt");
    let o = run(&[
        "attack",
        "--config",
        cfg.to_str().unwrap(),
        "--private",
        missing.to_str().unwrap(),
        "--nonprivate",
        ck,
    ]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("missing.ckpt"), "{}", stderr(&o));

    let o = run(&[
        "attack",
        "--config",
        cfg.to_str().unwrap(),
        "--private",
        ck,
        "--nonprivate",
        ck,
        "--set",
        "model.hidden_dim=5",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    for model in ["logistic", "mlp"] {
        let o = run(&["gradcheck", "--model", model, "--draws", "100"]);
        assert!(o.status.success(), "{model}: {}", stderr(&o));
    }
    let o = run(&["gradcheck", "--model", "mlp", "--corrupt"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn synth_writes_reproducible_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    for out in [&a, &b] {
        let o = run(&[
            "synth",
            "--n-patients",
            "10",
            "--per-patient",
            "5",
            "--dim",
            "4",
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 51);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let db = load_csv(&a).unwrap();
    assert_eq!((db.num_patients(), db.num_examples(), db.feature_dim()), (10, 50, 4));

    let o = run(&[
        "synth",
        "--n-patients",
        "2",
        "--per-patient",
        "1",
        "--dim",
        "2",
        "--out",
        "/nonexistent/dir/x.csv",
    ]);
    assert_eq!(o.status.code(), Some(2));
}
