//! End-to-end tests of the command line binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sliceseg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth(dir: &Path, cases: usize, extra: &[&str]) {
    let dir = dir.to_str().unwrap();
    let cases = cases.to_string();
    let mut args = vec![
        "synth", "--out", dir, "--cases", &cases, "--depth", "6", "--height", "16", "--width", "16",
    ];
    args.extend_from_slice(extra);
    let out = run(&args);
    assert!(out.status.success(), "synth failed: {}", stderr(&out));
}

#[test]
fn oracle_eval_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    synth(&ds, 3, &[]);
    let out = run(&["eval", "--data", ds.to_str().unwrap(), "--oracle"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(
        text.contains("dsc,1.000000,0.000000,1.000000,1.000000"),
        "{text}"
    );
    assert!(
        text.contains("ji,1.000000,0.000000,1.000000,1.000000"),
        "{text}"
    );
}

#[test]
fn train_eval_predict_sweep_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    synth(&ds, 4, &[]);
    let model = tmp.path().join("m.segn");
    let log = tmp.path().join("log.csv");

    let out = run(&[
        "train",
        "--data",
        ds.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--arch",
        "2x1x4",
        "--epochs",
        "1",
        "--patience",
        "1",
        "--batch",
        "6",
        "--log",
        log.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "train failed: {}", stderr(&out));
    assert!(model.exists());
    let log_text = fs::read_to_string(&log).unwrap();
    assert!(log_text.starts_with("phase,epoch,train_loss,monitor_dsc\n"));

    let scores = tmp.path().join("scores.csv");
    let out = run(&[
        "eval",
        "--data",
        ds.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out",
        scores.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "eval failed: {}", stderr(&out));
    assert!(stdout(&out).starts_with("metric,mean,std,worst,best\n"));
    let score_text = fs::read_to_string(&scores).unwrap();
    assert!(score_text.starts_with("case_id,threshold,dsc,ji\n"));
    assert_eq!(
        score_text.lines().count(),
        5,
        "one row per case plus header"
    );

    let imgs = tmp.path().join("imgs");
    let out = run(&[
        "predict",
        "--data",
        ds.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--case",
        "case001",
        "--out",
        imgs.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "predict failed: {}", stderr(&out));
    let prob = fs::read(imgs.join("case001_slice000_prob.pgm")).unwrap();
    assert!(prob.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(prob.len(), "P5\n16 16\n255\n".len() + 16 * 16);
    assert!(imgs.join("case001_slice005_overlay.pgm").exists());

    let sweep = tmp.path().join("sweep.csv");
    let out = run(&[
        "sweep",
        "--data",
        ds.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out",
        sweep.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "sweep failed: {}", stderr(&out));
    let sweep_text = fs::read_to_string(&sweep).unwrap();
    assert_eq!(sweep_text.lines().count(), 1 + 4 * 19);
}

#[test]
fn rnn_training_saves_a_loadable_model() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    synth(&ds, 4, &[]);
    let model = tmp.path().join("r.segn");
    let out = run(&[
        "train",
        "--data",
        ds.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--arch",
        "2x1x4",
        "--epochs",
        "1",
        "--patience",
        "1",
        "--batch",
        "6",
        "--rnn",
        "--hidden",
        "2",
        "--window",
        "3",
    ]);
    assert!(out.status.success(), "rnn train failed: {}", stderr(&out));

    let out = run(&["params", "--model", model.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(stdout(&out).starts_with("rnn "), "{}", stdout(&out));

    let out = run(&[
        "eval",
        "--data",
        ds.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "rnn eval failed: {}", stderr(&out));
}

#[test]
fn zero_epochs_saves_the_initialized_model() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    synth(&ds, 2, &[]);
    let model = tmp.path().join("z.segn");
    let out = run(&[
        "train",
        "--data",
        ds.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--arch",
        "2x1x4",
        "--epochs",
        "0",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("untrained cnn"));
    let out = run(&["params", "--model", model.to_str().unwrap()]);
    assert!(stdout(&out).starts_with("cnn "), "{}", stdout(&out));
}

#[test]
fn config_file_fills_defaults_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("defaults.cfg");
    fs::write(
        &cfg,
        "# synth defaults\ncases=3\ndepth=6\nheight=16\nwidth=16\n",
    )
    .unwrap();

    let ds_a = tmp.path().join("a");
    let out = run(&[
        "synth",
        "--out",
        ds_a.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("wrote 3 cases"));

    let ds_b = tmp.path().join("b");
    let out = run(&[
        "synth",
        "--out",
        ds_b.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--cases",
        "2",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(
        stdout(&out).contains("wrote 2 cases"),
        "flag must beat config file"
    );
}

#[test]
fn reruns_are_byte_identical_on_one_thread() {
    let tmp = tempfile::tempdir().unwrap();
    let ds_a = tmp.path().join("a");
    let ds_b = tmp.path().join("b");
    synth(&ds_a, 3, &["--threads", "1", "--seed", "9"]);
    synth(&ds_b, 3, &["--threads", "1", "--seed", "9"]);
    for name in [
        "manifest.csv",
        "case000.img.vseg",
        "case002.lbl.vseg",
        "corruption.csv",
    ] {
        assert_eq!(
            fs::read(ds_a.join(name)).unwrap(),
            fs::read(ds_b.join(name)).unwrap(),
            "{name} differs between reruns"
        );
    }

    let model_a = tmp.path().join("a.segn");
    let model_b = tmp.path().join("b.segn");
    for model in [&model_a, &model_b] {
        let out = run(&[
            "train",
            "--data",
            ds_a.to_str().unwrap(),
            "--out",
            model.to_str().unwrap(),
            "--arch",
            "2x1x4",
            "--epochs",
            "1",
            "--patience",
            "1",
            "--batch",
            "6",
            "--seed",
            "3",
            "--threads",
            "1",
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert_eq!(
        fs::read(&model_a).unwrap(),
        fs::read(&model_b).unwrap(),
        "training reruns must produce identical checkpoints"
    );
}

#[test]
fn exit_codes_distinguish_usage_from_runtime_errors() {
    let out = run(&["bogus"]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "unknown subcommand is a usage error"
    );

    let out = run(&["synth"]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "missing required flag is a usage error"
    );

    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    synth(&ds, 2, &[]);
    let out = run(&["eval", "--data", ds.to_str().unwrap()]);
    assert_eq!(
        out.status.code(),
        Some(1),
        "missing model is a runtime error"
    );

    let out = run(&["eval", "--data", "/nonexistent-path", "--oracle"]);
    assert_eq!(out.status.code(), Some(1));

    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("synth"));
}
