use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn crica(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crica"))
        .args(args)
        .env_remove("CRICA_SEED")
        .output()
        .expect("spawn crica")
}

fn ok(args: &[&str]) -> String {
    let out = crica(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    crica(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir`, relative path → bytes.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_data(tmp: &TempDir) -> PathBuf {
    let dir = tmp.path().join("data");
    ok(&["gen-data", "--places", "8", "--per-place", "4", "--seed", "3", "--out", s(&dir)]);
    dir
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn gen_data_is_reproducible_and_validated() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-data", "--places", "5", "--per-place", "3", "--seed", "9", "--out", s(&a)]);
    ok(&["gen-data", "--places", "5", "--per-place", "3", "--seed", "9", "--out", s(&b)]);
    let ta = tree(&a);
    assert_eq!(ta, tree(&b));
    assert_eq!(ta.iter().filter(|(p, _)| p.starts_with("images")).count(), 15);
    assert!(a.join("gen-data.toml").exists());

    assert_eq!(code(&["gen-data", "--places", "2", "--out", s(&tmp.path().join("c"))]), 1);
}

#[test]
fn seed_env_overrides_default() {
    let tmp = TempDir::new().unwrap();
    let run = |seed: &str, dir: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_crica"))
            .args(["gen-data", "--places", "4", "--per-place", "2", "--out", s(&tmp.path().join(dir))])
            .env("CRICA_SEED", seed)
            .output()
            .unwrap();
        assert!(out.status.success());
        tree(&tmp.path().join(dir))
    };
    assert_eq!(run("4", "x"), run("4", "y"));
    assert_ne!(run("4", "x"), run("5", "z"));
}

#[test]
fn train_is_reproducible_and_resumable() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(&tmp);
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    train(&data, &a, &["--epochs", "2"]);
    train(&data, &b, &["--epochs", "2"]);
    for f in ["checkpoint.bin", "optimizer.bin", "metrics.log", "run.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(a.join("metrics.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.contains("lr=3.000e-3") && l.contains("val_r5=")));

    // one epoch, then resume for the second
    train(&data, &c, &["--epochs", "1"]);
    let ckpt = c.join("checkpoint.bin");
    train(&data, &c, &["--epochs", "2", "--resume", s(&ckpt)]);
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(&ckpt).unwrap());
    assert_eq!(log, fs::read_to_string(c.join("metrics.log")).unwrap());
}

#[test]
fn no_crica_switch_is_recorded() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(&tmp);
    let out = tmp.path().join("run");
    train(&data, &out, &["--epochs", "1", "--no-crica"]);
    let cfg = fs::read_to_string(out.join("run.toml")).unwrap();
    assert!(cfg.contains("use_crica = false"), "{cfg}");
}

#[test]
fn config_file_rules() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(&tmp);
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "version = 1\nseed = 2\n[train]\nepochs = 1\nwarmup = 3\n").unwrap();
    let out = tmp.path().join("run");
    let args = ["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)];
    assert_eq!(code(&args), 1);

    fs::write(&cfg, "version = 1\nseed = 2\n[train]\nepochs = 1\n").unwrap();
    ok(&args);
    let resolved = fs::read_to_string(out.join("run.toml")).unwrap();
    assert!(resolved.contains("seed = 2"));
    assert!(resolved.contains("[model.backbone]"));

    fs::write(&cfg, "version = 1\n[train]\nplaces_per_batch = 40\n").unwrap();
    assert_eq!(code(&args), 2, "not enough places is a data error");
}

#[test]
fn extract_eval_and_pca() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(&tmp);
    let run = tmp.path().join("run");
    train(&data, &run, &["--epochs", "1"]);
    let ckpt = run.join("checkpoint.bin");
    let manifest = data.join("manifest.csv");
    let p = |n: &str| tmp.path().join(n);

    ok(&["extract", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--role", "db", "--out", s(&p("db"))]);
    ok(&["extract", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--role", "db", "--out", s(&p("db2"))]);
    assert_eq!(fs::read(p("db")).unwrap(), fs::read(p("db2")).unwrap());
    assert!(p("db.toml").exists());

    let q = crica(&[
        "extract", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--role", "query", "--batch", "1",
        "--out", s(&p("q")),
    ]);
    assert!(q.status.success());
    assert!(String::from_utf8_lossy(&q.stderr).contains("warning"));
    assert!(String::from_utf8_lossy(&q.stdout).contains("wrote 8 descriptors of dim 896"));

    let report = ok(&[
        "eval", "--db", s(&p("db")), "--queries", s(&p("q")), "--manifest", s(&manifest), "--Ns", "1,5,10",
    ]);
    let recalls: Vec<f64> = report
        .lines()
        .filter(|l| l.starts_with("R@"))
        .map(|l| l.split_whitespace().last().unwrap().parse().unwrap())
        .collect();
    assert_eq!(recalls.len(), 3);
    assert!(recalls.windows(2).all(|w| w[0] <= w[1]), "{recalls:?}");

    ok(&["pca", "--descriptors", s(&p("db")), "--dim", "8", "--out", s(&p("pca"))]);
    ok(&["pca", "--descriptors", s(&p("q")), "--model", s(&p("pca")), "--out", s(&p("q8"))]);
    assert_eq!(code(&["pca", "--descriptors", s(&p("db")), "--dim", "4096", "--out", s(&p("x"))]), 1);

    assert_eq!(code(&["extract", "--checkpoint", s(&p("missing")), "--manifest", s(&manifest), "--out", s(&p("y"))]), 2);
}

#[test]
fn gradcheck_exit_codes() {
    let out = ok(&["gradcheck", "--module", "gem"]);
    let names: Vec<&str> = out.lines().filter(|l| l.contains(" gem ")).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(names, ["gem", "spm_gem"]);

    assert_eq!(code(&["gradcheck", "--module", "gem", "--inject-sign-bug"]), 3);
    assert_eq!(code(&["gradcheck", "--module", "nonexistent"]), 1);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["--help"]), 0);
}
