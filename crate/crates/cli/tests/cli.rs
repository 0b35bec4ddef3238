use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lca")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn files_under(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn synth(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synth", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    lca(&args)
}

/// Small dataset plus a one-epoch config in `dir`.
fn small_run(dir: &Path, extra: &str) -> std::path::PathBuf {
    let o = synth(&dir.join("data"), &["--classes", "3", "--per-class", "6", "--test-per-class", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = dir.join("run.cfg");
    fs::write(
        &cfg,
        format!("data.train=data/train\ndata.test=data/test\nchannels=4,8\nbatch_size=8\nepochs=1\n{extra}\n"),
    )
    .unwrap();
    cfg
}

#[test]
fn synth_writes_default_counts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&synth(&a, &[])), 0);
    assert_eq!(code(&synth(&b, &[])), 0);
    let fa = files_under(&a.join("train"));
    assert_eq!(fa.len(), 512);
    assert_eq!(files_under(&a.join("test")).len(), 128);
    assert_eq!(fs::read_dir(a.join("train")).unwrap().count(), 8);
    for (x, y) in files_under(&a).iter().zip(files_under(&b)) {
        assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
        assert_eq!(fs::read(x).unwrap(), fs::read(&y).unwrap());
    }
}

#[test]
fn synth_rejects_too_many_classes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&synth(&dir.path().join("d"), &["--classes", "17"])), 2);
}

#[test]
fn train_eval_inspect_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), "lambda_entropy=0\nhead=lca\nlca.embed_dim=32");
    let o = lca(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("epoch,train_loss,train_nll"));

    let ckpt = dir.path().join("checkpoint.lcac");
    let ckpt = ckpt.to_str().unwrap();
    let test = dir.path().join("data/test");
    let eval = || lca(&["eval", "--ckpt", ckpt, "--data", test.to_str().unwrap()]);
    let (e1, e2) = (eval(), eval());
    assert_eq!(code(&e1), 0, "{}", String::from_utf8_lossy(&e1.stderr));
    assert!(stdout(&e1).starts_with("accuracy="));
    assert_eq!(e1.stdout, e2.stdout);

    let o = lca(&["inspect", "--ckpt", ckpt]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.starts_with("lca.fc_weight") && l.contains("32x8")), "{text}");
    let listed: usize = text
        .lines()
        .filter(|l| l.contains('.') && !l.contains('='))
        .map(|l| l.split_whitespace().nth(2).unwrap().parse::<usize>().unwrap())
        .sum();
    let total: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("total_params="))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(listed, total);
}

#[test]
fn bad_config_key_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), "no_such_key=1");
    let o = lca(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
}

#[test]
fn missing_data_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "data.train=nowhere/train\ndata.test=nowhere/test\nepochs=1\n").unwrap();
    assert_eq!(code(&lca(&["train", "--config", cfg.to_str().unwrap()])), 3);
}

#[test]
fn corrupt_checkpoint_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), "head=gap");
    assert_eq!(code(&lca(&["train", "--config", cfg.to_str().unwrap()])), 0);
    let ckpt = dir.path().join("checkpoint.lcac");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[..4].copy_from_slice(b"NOPE");
    fs::write(&ckpt, bytes).unwrap();
    assert_eq!(code(&lca(&["inspect", "--ckpt", ckpt.to_str().unwrap()])), 3);
}

#[test]
fn eval_on_mismatched_images_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), "head=gap");
    assert_eq!(code(&lca(&["train", "--config", cfg.to_str().unwrap()])), 0);
    let other = dir.path().join("wide");
    assert_eq!(code(&synth(&other, &["--classes", "5", "--per-class", "1", "--test-per-class", "1"])), 0);
    let o = lca(&[
        "eval",
        "--ckpt",
        dir.path().join("checkpoint.lcac").to_str().unwrap(),
        "--data",
        other.join("test").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn gradcheck_passes() {
    let o = lca(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("checks passed"));
}
