//! End-to-end tests of the `lrnet` binary: each test drives the compiled
//! executable through a temp directory, the way a user would.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lrnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrnet"))
        .args(args)
        .output()
        .expect("failed to launch lrnet binary")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_exit(out: &Output, code: i32, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{what}: expected exit {code}\nstdout:\n{}\nstderr:\n{}",
        stdout_of(out),
        stderr_of(out)
    );
}

/// Write a config that keeps synthetic images small so tests stay fast.
fn write_small_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.cfg");
    let text = "\
window = 32
count = 10
extent_min = 48
extent_max = 72
targets_min = 1
targets_max = 2
sigma_min = 1.5
sigma_max = 2.5
amplitude_min = 0.6
amplitude_max = 0.9
noise = 0.01
epochs = 2
batch_size = 4
seed = 17
";
    std::fs::write(&path, text).unwrap();
    path
}

/// Minimal independent PGM reader so the tests do not trust the library's.
fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let text_end = bytes
        .windows(1)
        .enumerate()
        .filter(|(_, b)| b[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .expect("PGM header should span three lines");
    let header = std::str::from_utf8(&bytes[..text_end]).expect("ASCII header");
    let mut lines = header.lines();
    assert_eq!(lines.next(), Some("P5"));
    let mut dims = lines.next().unwrap().split_whitespace();
    let w: usize = dims.next().unwrap().parse().unwrap();
    let h: usize = dims.next().unwrap().parse().unwrap();
    assert_eq!(lines.next(), Some("255"));
    let raster = bytes[text_end + 1..].to_vec();
    assert_eq!(raster.len(), h * w, "raster length");
    (h, w, raster)
}

/// Synth + train into `dir` using the small config; returns (config, data, out).
fn train_small_model(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let cfg = write_small_config(dir);
    let data = dir.join("data");
    let out = dir.join("out");
    let synth = lrnet(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
    ]);
    assert_exit(&synth, 0, "synth");
    let train = lrnet(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_exit(&train, 0, "train");
    (cfg, data, out)
}

#[test]
fn synth_is_deterministic_and_splits_four_to_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_small_config(tmp.path());
    for sub in ["a", "b"] {
        let out = lrnet(&[
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--data-dir",
            tmp.path().join(sub).to_str().unwrap(),
        ]);
        assert_exit(&out, 0, "synth");
        assert!(stdout_of(&out).contains("10 samples"), "{}", stdout_of(&out));
        assert!(stdout_of(&out).contains("8 train / 2 test"), "{}", stdout_of(&out));
    }
    let manifest = std::fs::read_to_string(tmp.path().join("a/manifest.txt")).unwrap();
    for line in manifest.lines().filter(|l| !l.starts_with('#')) {
        let name = line.split_whitespace().next().unwrap();
        let left = std::fs::read(tmp.path().join("a").join(name)).unwrap();
        let right = std::fs::read(tmp.path().join("b").join(name)).unwrap();
        assert_eq!(left, right, "{name} should be byte-identical across runs");
    }
    assert_eq!(
        manifest,
        std::fs::read_to_string(tmp.path().join("b/manifest.txt")).unwrap()
    );
}

#[test]
fn synth_count_zero_writes_an_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("zero.cfg");
    std::fs::write(&cfg, "count = 0\n").unwrap();
    let data0 = tmp.path().join("empty");
    let out = lrnet(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--data-dir",
        data0.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "synth count=0");
    let manifest = std::fs::read_to_string(data0.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 0);
}

#[test]
fn train_writes_weights_and_a_per_epoch_log() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, _, out_dir) = train_small_model(tmp.path());
    assert!(out_dir.join("weights-best.lrnw").exists());
    assert!(out_dir.join("weights-last.lrnw").exists());
    let log = std::fs::read_to_string(out_dir.join("train-log.txt")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2, "one log line per epoch:\n{log}");
    assert!(lines[0].starts_with("epoch 1 train "), "{}", lines[0]);
    assert!(lines[1].contains(" val "), "{}", lines[1]);
}

#[test]
fn infer_writes_binary_masks_with_source_extents() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, data, out_dir) = train_small_model(tmp.path());
    let pred = tmp.path().join("pred");
    let infer = lrnet(&[
        "infer",
        "--config",
        cfg.to_str().unwrap(),
        "--weights",
        out_dir.join("weights-best.lrnw").to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--out-dir",
        pred.to_str().unwrap(),
        "--split",
        "test",
    ]);
    assert_exit(&infer, 0, "infer");
    let manifest = std::fs::read_to_string(data.join("manifest.txt")).unwrap();
    let mut checked = 0;
    for line in manifest.lines().filter(|l| l.ends_with(" test")) {
        let mut cols = line.split_whitespace();
        let image = cols.next().unwrap();
        let mask = cols.next().unwrap();
        let (ih, iw, _) = read_pgm(&data.join(image));
        let (mh, mw, raster) = read_pgm(&pred.join(mask));
        assert_eq!((mh, mw), (ih, iw), "{mask} extents");
        assert!(
            raster.iter().all(|&b| b == 0 || b == 255),
            "{mask} must be strictly binary"
        );
        checked += 1;
    }
    assert_eq!(checked, 2, "the 10-sample set holds 2 test images");
}

#[test]
fn eval_record_is_internally_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, data, out_dir) = train_small_model(tmp.path());
    let pred = tmp.path().join("pred");
    let infer = lrnet(&[
        "infer",
        "--config",
        cfg.to_str().unwrap(),
        "--weights",
        out_dir.join("weights-best.lrnw").to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--out-dir",
        pred.to_str().unwrap(),
        "--split",
        "test",
    ]);
    assert_exit(&infer, 0, "infer");
    let eval = lrnet(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--pred-dir",
        pred.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--split",
        "test",
    ]);
    assert_exit(&eval, 0, "eval");

    let record = std::fs::read_to_string(pred.join("eval-record.txt")).unwrap();
    let field = |key: &str| -> f64 {
        record
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
            .unwrap_or_else(|| panic!("record lacks {key}: {record}"))
            .parse()
            .unwrap_or_else(|_| panic!("unparsable {key} in {record}"))
    };
    let (iou, pd, fa) = (field("iou"), field("pd"), field("fa"));
    let (params, flops) = (field("params"), field("flops"));
    let s_p = 0.5 * (iou + pd);
    let s_e = 100.0 * (1.0 - 0.5 * (params / 1e6 / 2.225 + flops / 1e9 / 12.56));
    assert!((field("s_p") - s_p).abs() < 1e-9, "s_p mismatch in {record}");
    assert!((field("s_e") - s_e).abs() < 1e-9, "s_e mismatch in {record}");
    assert!(
        (field("s_pe") - 0.5 * (s_p + s_e)).abs() < 1e-9,
        "s_pe mismatch in {record}"
    );
    let valid = record.contains("valid=true");
    assert_eq!(valid, fa < 1e-4, "validity flag must mirror fa < 1e-4: {record}");
    // The eval output echoes the same record line on stdout.
    assert!(stdout_of(&eval).contains(record.trim()), "stdout lacks record line");
}

#[test]
fn eval_rejects_unpaired_predictions_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, data, out_dir) = train_small_model(tmp.path());
    let pred = tmp.path().join("pred");
    let infer = lrnet(&[
        "infer",
        "--config",
        cfg.to_str().unwrap(),
        "--weights",
        out_dir.join("weights-best.lrnw").to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--out-dir",
        pred.to_str().unwrap(),
        "--split",
        "test",
    ]);
    assert_exit(&infer, 0, "infer");
    // Drop one prediction, then evaluate: the gap must be reported by name.
    let victim = std::fs::read_dir(&pred)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .find(|n| n.ends_with(".pgm"))
        .unwrap();
    std::fs::remove_file(pred.join(&victim)).unwrap();
    let eval = lrnet(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--pred-dir",
        pred.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--split",
        "test",
    ]);
    assert_exit(&eval, 2, "eval with a missing prediction");
    assert!(
        stderr_of(&eval).contains(&victim),
        "error should name {victim}: {}",
        stderr_of(&eval)
    );
}

#[test]
fn score_prints_published_values() {
    for (args, want) in [
        (["score", "42.54", "63.82", "0.020", "0.063"], "S_pe = 76.24"),
        (["score", "34.27", "60.19", "0.016", "0.043"], "S_pe = 73.35"),
        (["score", "42.99", "63.58", "0.038", "0.063"], "S_pe = 76.09"),
    ] {
        let out = lrnet(&args);
        assert_exit(&out, 0, "score");
        assert!(stdout_of(&out).contains(want), "want {want}, got {}", stdout_of(&out));
    }
}

#[test]
fn score_rejects_negative_inputs() {
    let out = lrnet(&["score", "50.0", "50.0", "-0.1", "0.063"]);
    assert_exit(&out, 1, "negative params");
}

#[test]
fn gradcheck_passes_and_reports_the_worst_component() {
    let out = lrnet(&["gradcheck", "--seeds", "1", "--layers-only"]);
    assert_exit(&out, 0, "gradcheck");
    let text = stdout_of(&out);
    assert!(text.contains("PASS"), "{text}");
    assert!(!text.contains("FAIL"), "{text}");
    assert!(text.contains("worst component:"), "{text}");
    assert!(text.contains("checks passed"), "{text}");
}

#[test]
fn corrupted_gradcheck_exits_with_numeric_failure() {
    let out = lrnet(&["gradcheck", "--seeds", "1", "--layers-only", "--corrupt"]);
    assert_exit(&out, 3, "corrupted gradcheck");
    assert!(stdout_of(&out).contains("FAIL"), "{}", stdout_of(&out));
}

#[test]
fn unknown_config_keys_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "windwo = 64\n").unwrap();
    let out = lrnet(&["synth", "--config", cfg.to_str().unwrap()]);
    assert_exit(&out, 1, "unknown key");
    assert!(stderr_of(&out).contains("windwo"), "{}", stderr_of(&out));
}

#[test]
fn flags_override_config_file_values() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, data, out_dir) = train_small_model(tmp.path());
    // The file leaves tau at its default; an out-of-range flag must win
    // (and be rejected), proving the flag overrides the file.
    let infer = lrnet(&[
        "infer",
        "--config",
        cfg.to_str().unwrap(),
        "--tau",
        "1.5",
        "--weights",
        out_dir.join("weights-best.lrnw").to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--out-dir",
        tmp.path().join("pred").to_str().unwrap(),
    ]);
    assert_exit(&infer, 1, "tau flag should override the file and be validated");
    assert!(stderr_of(&infer).contains("tau"), "{}", stderr_of(&infer));
}

#[test]
fn split_flag_is_validated() {
    let out = lrnet(&["infer", "--split", "bogus"]);
    assert_exit(&out, 1, "bad split");
    assert!(stderr_of(&out).contains("train, test, or all"), "{}", stderr_of(&out));
}

#[test]
fn help_and_version_exit_cleanly() {
    assert_exit(&lrnet(&["--help"]), 0, "help");
    assert_exit(&lrnet(&["--version"]), 0, "version");
    let out = lrnet(&["no-such-command"]);
    assert_exit(&out, 1, "unknown subcommand");
}
