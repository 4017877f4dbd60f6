use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn oad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oad")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synth", "--out", dir.to_str().unwrap(), "--streams", "2", "--T", "48", "--d", "8", "--K", "2"];
    args.extend_from_slice(extra);
    oad(&args)
}

#[test]
fn help_lists_every_command() {
    let out = oad(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["synth", "train", "eval", "infer", "grid", "inspect"] {
        assert!(text.contains(cmd), "help is missing {cmd}");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&oad(&["train"])), 2);
    assert_eq!(code(&oad(&["frobnicate"])), 2);
    let tmp = tempfile::tempdir().unwrap();
    let out = synth(tmp.path(), &["--K", "1"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let data = tmp.path().join("data");
    assert_eq!(code(&synth(&data, &[])), 0);
    let out = oad(&["train", "--data", data.to_str().unwrap(), "--out", "x", "--model", "nope"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&synth(&a, &["--seed", "4"])), 0);
    assert_eq!(code(&synth(&b, &["--seed", "4"])), 0);
    for name in ["synth-0000.oadf", "synth-0001.oadf"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
}

#[test]
fn train_eval_infer_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();
    assert_eq!(code(&synth(&tmp.path().join("data"), &[])), 0);
    let out = oad(&["train", "--data", &p("data"), "--out", &p("run"), "--model", "m4", "--width", "0.004", "--epochs", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = p("run/model.ckpt");
    assert!(Path::new(&ckpt).exists());

    // eval picks the checkpoint's model from flags; matching flags succeed
    let out = oad(&["eval", "--checkpoint", &ckpt, "--data", &p("data"), "--out", &p("eval"), "--model", "m4", "--width", "0.004"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(p("eval/report.txt")).unwrap().contains("cAP"));

    let out = oad(&["eval", "--checkpoint", &ckpt, "--data", &p("data"), "--out", &p("eval2"), "--model", "lstm"]);
    assert_eq!(code(&out), 3);

    let out = oad(&["infer", "--checkpoint", &ckpt, "--data", &p("data"), "--out", &p("infer"), "--model", "m4", "--width", "0.004"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(p("infer/synth-0000.timeline.csv")).unwrap();
    assert_eq!(csv.lines().count(), 49);

    let out = oad(&["inspect", &ckpt]);
    assert_eq!(code(&out), 0);
}

#[test]
fn malformed_stream_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.oadf");
    fs::write(&bad, b"OADF\x01\x00").unwrap();
    assert_eq!(code(&oad(&["inspect", bad.to_str().unwrap()])), 3);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "streams = 3\nT = 20\nd = 4\nK = 2\n").unwrap();
    let out_dir = tmp.path().join("out");
    let out = oad(&["synth", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--streams", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let count = fs::read_dir(&out_dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "oadf"))
        .count();
    assert_eq!(count, 1);

    fs::write(&cfg, "bogus = 1\n").unwrap();
    assert_eq!(code(&oad(&["synth", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()])), 2);
}
