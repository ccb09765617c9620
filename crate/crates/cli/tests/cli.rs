use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dcn() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dcn"));
    c.env_remove("DCN_THREADS");
    c
}

fn quick_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.ini")
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn dcn")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn synth(dir: &Path, count: usize, seed: u64) -> Output {
    run(dcn().args(["--seed", &seed.to_string(), "synth", "--count", &count.to_string(), "--out"]).arg(dir))
}

#[test]
fn synth_is_deterministic_and_indexed() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    assert!(synth(&a, 6, 4).status.success());
    assert!(synth(&b, 6, 4).status.success());
    let index = std::fs::read_to_string(a.join("index.tsv")).unwrap();
    assert_eq!(index.lines().count(), 7);
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 13);
    assert_eq!(
        fa.iter().map(|f| f.strip_prefix(&a).unwrap()).collect::<Vec<_>>(),
        fb.iter().map(|f| f.strip_prefix(&b).unwrap()).collect::<Vec<_>>()
    );
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn synth_rejects_zero_count() {
    let root = tempfile::tempdir().unwrap();
    let out = synth(&root.path().join("d"), 0, 1);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_segment_round() {
    let root = tempfile::tempdir().unwrap();
    let (data, run_dir) = (root.path().join("data"), root.path().join("run"));
    assert!(synth(&data, 12, 2).status.success());

    let out =
        run(dcn().arg("--config").arg(quick_config()).arg("train").arg("--data").arg(&data).arg("--out").arg(&run_dir));
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    for path in ["fused", "lpl", "cgl"] {
        assert!(stdout.contains(&format!("auc {path} ")), "{stdout}");
    }
    for f in ["final.ckpt", "state.ckpt", "history.tsv", "report.txt", "roc.svg", "config.ini"] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }

    let ckpt = run_dir.join("final.ckpt");
    let out = run(dcn()
        .arg("--config")
        .arg(quick_config())
        .arg("eval")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .args(["--split", "test"]));
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).starts_with("mean dice "));

    let mask = root.path().join("mask.pgm");
    let image = data.join(
        std::fs::read_to_string(data.join("index.tsv")).unwrap().lines().nth(1).unwrap().split('\t').nth(1).unwrap(),
    );
    let out = run(dcn()
        .arg("--config")
        .arg(quick_config())
        .arg("segment")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--image")
        .arg(&image)
        .arg("--mask-out")
        .arg(&mask));
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(mask.is_file());
    assert!(root.path().join("mask.soft.pgm").is_file());
}

#[test]
fn missing_data_dir_is_a_usage_error() {
    let root = tempfile::tempdir().unwrap();
    let missing = root.path().join("nowhere");
    let out = run(dcn().arg("train").arg("--data").arg(&missing).arg("--out").arg(root.path().join("o")));
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("nowhere"));
}

#[test]
fn bad_config_lists_every_problem() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("bad.ini");
    std::fs::write(&cfg, "[training]\nlambda = 2\nbogus = 1\n[crf]\niterations = x\n").unwrap();
    let out = run(dcn().arg("--config").arg(&cfg).args(["verify", "--suite", "metrics"]));
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    assert!(err.contains("bogus") && err.contains("iterations"), "{err}");
}

#[test]
fn architecture_mismatch_is_a_runtime_error() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    assert!(synth(&data, 4, 3).status.success());
    let cfg = root.path().join("toy.ini");
    std::fs::write(&cfg, "[network]\npreset = toy\n").unwrap();
    let ckpt = root.path().join("init.ckpt");
    let out = run(dcn()
        .arg("--config")
        .arg(&cfg)
        .arg("train")
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(root.path().join("r"))
        .args(["--max-epochs", "0"]));
    assert!(out.status.success(), "{}", text(&out.stderr));
    std::fs::copy(root.path().join("r/state.ckpt"), &ckpt).unwrap();
    let out = run(dcn().arg("eval").arg("--ckpt").arg(&ckpt).arg("--data").arg(&data));
    assert_eq!(out.status.code(), Some(1), "{}", text(&out.stderr));
}

#[test]
fn verify_prints_pass_lines() {
    let out = run(dcn().args(["verify", "--suite", "crf"]));
    assert!(out.status.success());
    let stdout = text(&out.stdout);
    assert!(!stdout.is_empty() && stdout.lines().all(|l| l.starts_with("PASS ")), "{stdout}");
}

#[test]
fn invalid_thread_cap_is_rejected() {
    let out = run(dcn().env("DCN_THREADS", "0").args(["verify", "--suite", "metrics"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(run(dcn().arg("frobnicate")).status.code(), Some(2));
}
