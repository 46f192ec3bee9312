use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_advdrop");

fn advdrop(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("ADVDROP_SEED").env("RUST_LOG", "warn").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

const SMALL: &[&str] = &[
    "--set", "samples=240",
    "--set", "train_size=160",
    "--set", "val_size=40",
    "--set", "test_size=40",
    "--set", "hidden=6",
    "--set", "seq_len=5",
];

fn train_small(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["train", "--task", "parity", "--out", out];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    advdrop(&args)
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn train_writes_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_small(dir.path(), &["--reg", "none", "--epochs", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = read(dir.path().join("metrics.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,reg_value,val_error,test_error");
    assert_eq!(lines.len(), 4);
    for (i, l) in lines[1..].iter().enumerate() {
        assert!(l.starts_with(&format!("{},", i + 1)));
        assert_eq!(l.split(',').count(), 5);
    }
    assert!(dir.path().join("model.ckpt").exists());
    let manifest = read(dir.path().join("manifest.txt"));
    assert!(manifest.contains("# config_sha256 = "));
    assert!(manifest.contains("regularizer = none"));
}

#[test]
fn rerun_from_manifest_is_byte_identical() {
    let first = tempfile::tempdir().unwrap();
    let o = train_small(first.path(), &["--reg", "add", "--epochs", "2", "--p", "0.1", "--delta", "0.34"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let second = tempfile::tempdir().unwrap();
    let manifest = first.path().join("manifest.txt");
    let o = advdrop(&["train", "--config", manifest.to_str().unwrap(), "--out", second.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(first.path().join("metrics.csv")).unwrap(),
        std::fs::read(second.path().join("metrics.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(first.path().join("model.ckpt")).unwrap(),
        std::fs::read(second.path().join("model.ckpt")).unwrap()
    );
    // the output directory does not enter the config hash
    let hash = |p: &Path| read(p.join("manifest.txt")).lines().nth(1).unwrap().to_string();
    assert_eq!(hash(first.path()), hash(second.path()));
}

#[test]
fn unknown_key_is_a_config_error_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# comment\ntask = parity\nlearning_rate = 0.1\n").unwrap();
    let o = advdrop(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("line 3"), "{err}");
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn bad_values_and_usage_exit_two() {
    assert_eq!(advdrop(&["train", "--reg", "bogus"]).status.code(), Some(2));
    assert_eq!(advdrop(&["train", "--set", "noequals"]).status.code(), Some(2));
    assert_eq!(advdrop(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(advdrop(&["verify", "nosuchsuite"]).status.code(), Some(2));
    assert_eq!(advdrop(&["--help"]).status.code(), Some(0));
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_small(dir.path(), &["--epochs", "2", "--set", "lr=1e308", "--set", "clip_norm=1e308"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("numeric failure"), "{}", stderr(&o));
}

#[test]
fn seed_from_environment_overrides_config() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let o = train_small(a.path(), &["--epochs", "1", "--seed", "9"]);
    assert!(o.status.success());
    let out = b.path().to_str().unwrap();
    let mut args = vec!["train", "--task", "parity", "--out", out, "--epochs", "1", "--seed", "1"];
    args.extend_from_slice(SMALL);
    let o = Command::new(BIN).args(&args).env("ADVDROP_SEED", "9").env("RUST_LOG", "info").output().unwrap();
    assert!(o.status.success());
    assert!(stderr(&o).contains("ADVDROP_SEED=9"), "{}", stderr(&o));
    assert!(read(b.path().join("manifest.txt")).contains("# seed = 9"));
    assert_eq!(read(a.path().join("metrics.csv")), read(b.path().join("metrics.csv")));
}

#[test]
fn quick_verify_exit_code_matches_its_lines() {
    let o = advdrop(&["verify", "all", "--quick", "--seed", "3"]);
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines.len() >= 8, "{text}");
    assert!(lines.iter().all(|l| l.starts_with("PASS ") || l.starts_with("FAIL ")), "{text}");
    let all_pass = lines.iter().all(|l| l.starts_with("PASS "));
    assert_eq!(o.status.code(), Some(if all_pass { 0 } else { 1 }), "{text}");

    let o = advdrop(&["verify", "grad", "--quick"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn eval_histogram_and_maskstats() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_small(dir.path(), &["--epochs", "2", "--set", "checkpoint_every_epoch=true"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = dir.path().join("model.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let o = advdrop(&["eval", "--checkpoint", ckpt, "--split", "val"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("split,examples,error,nll,perplexity"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..2], &["val", "40"]);
    let error: f64 = row[2].parse().unwrap();
    assert!((0.0..=1.0).contains(&error));
    assert_eq!(advdrop(&["eval", "--checkpoint", ckpt, "--split", "nope"]).status.code(), Some(2));

    let o = advdrop(&["histogram", "--checkpoint", ckpt, "--n-masks", "1", "--p", "0.2", "--delta", "0.34"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines, vec!["mask,random_accuracy,adversarial_accuracy", lines[1]]);
    assert!(lines[1].starts_with("0,"));

    let hist = dir.path().join("hist.csv");
    let o = advdrop(&["histogram", "--checkpoint", ckpt, "--n-masks", "3", "--out", hist.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(&hist).lines().count(), 4);

    let e1 = dir.path().join("epoch-001.ckpt");
    let e2 = dir.path().join("epoch-002.ckpt");
    let delta = 0.34;
    let o = advdrop(&["maskstats", e1.to_str().unwrap(), e2.to_str().unwrap(), "--delta", "0.34"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,unit0,unit1,unit2,unit3,unit4,unit5");
    assert_eq!(lines.len(), 3);
    let budget = ((delta * 6.0f64).floor() as usize).max(1);
    for (i, l) in lines[1..].iter().enumerate() {
        let cells: Vec<f64> = l.split(',').skip(1).map(|c| c.parse().unwrap()).collect();
        assert!(l.starts_with(&format!("{},", i + 1)));
        assert!(cells.iter().all(|m| (0.0..=1.0).contains(m)));
        let dropped: f64 = cells.iter().map(|m| 1.0 - m).sum();
        assert!(dropped <= budget as f64 + 1e-9, "{l}");
    }
}

#[test]
fn missing_manifest_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let fake = dir.path().join("model.ckpt");
    std::fs::write(&fake, b"junk").unwrap();
    let o = advdrop(&["eval", "--checkpoint", fake.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("manifest.txt"));
}
