use std::fs;
use std::path::Path;

use troikit::checkpoint::Checkpoint;
use troikit::cli::{read_metrics, run, EXIT_CHECK, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use troikit::synth::{load_dataset, read_manifest, MANIFEST};

fn troikit(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(
        std::iter::once("troikit").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, per_class: &str, seed: &str) {
    let (code, _, err) = troikit(&[
        "gen",
        "--out",
        s(dir),
        "--per-class",
        per_class,
        "--seed",
        seed,
        "--frames",
        "4",
        "--size",
        "16",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for entry in walk(dir) {
        files.push((
            entry.strip_prefix(dir).unwrap().display().to_string(),
            fs::read(&entry).unwrap(),
        ));
    }
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn gen_is_deterministic_and_refuses_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, "2", "9");
    gen(&b, "2", "9");
    assert_eq!(tree_bytes(&a), tree_bytes(&b));

    let (code, _, err) = troikit(&["gen", "--out", s(&a), "--per-class", "2"]);
    assert_eq!(code, EXIT_DATA);
    assert!(err.contains("--force"));
    let (code, _, _) = troikit(&["gen", "--out", s(&a), "--per-class", "1", "--force"]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(read_manifest(&a.join(MANIFEST)).unwrap().len(), 6);
}

#[test]
fn manifest_round_trip_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    gen(&dir, "1", "3");
    let videos = load_dataset(&dir).unwrap();
    let again = tmp.path().join("again");
    troikit::synth::save_dataset(&again, &videos, false).unwrap();
    assert_eq!(
        fs::read(dir.join(MANIFEST)).unwrap(),
        fs::read(again.join(MANIFEST)).unwrap()
    );
    assert_eq!(tree_bytes(&dir), tree_bytes(&again));
}

#[test]
fn train_resume_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run_dir) = (tmp.path().join("data"), tmp.path().join("run"));
    gen(&data, "2", "1");
    let config = tmp.path().join("small.txt");
    fs::write(&config, "frames = 4\nsize = 16\nchannels = 8,8,8,8\n").unwrap();
    let common = [
        "train",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--val",
        s(&data),
        "--out",
        s(&run_dir),
        "--batch-size",
        "4",
    ];
    let (code, out, err) = troikit(&[&common[..], &["--epochs", "1"]].concat());
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("epoch=1"));
    let (code, out, err) = troikit(&[&common[..], &["--epochs", "2", "--resume"]].concat());
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("resuming at epoch 1"));
    let records = read_metrics(&run_dir.join("metrics.log")).unwrap();
    assert_eq!(records.iter().map(|r| r.epoch).collect::<Vec<_>>(), [1, 2]);
    assert_eq!(
        Checkpoint::load(&run_dir.join("checkpoint.ckpt"))
            .unwrap()
            .epoch,
        2
    );

    let (code, _, _) = troikit(
        &[
            &common[..],
            &["--epochs", "3", "--resume", "--troi-layers", "2"],
        ]
        .concat(),
    );
    assert_eq!(code, EXIT_USAGE);

    let (code, _, err) = troikit(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&tmp.path().join("big")),
    ]);
    assert_eq!(code, EXIT_DATA);
    assert!(err.contains("mismatch"));

    let ckpt = run_dir.join("checkpoint.ckpt");
    let (code, out, err) = troikit(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--corrupt",
        "drop-all",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.starts_with("boxes drop-all\ntop1 "));
    assert_eq!(out.lines().filter(|l| l.starts_with("class ")).count(), 6);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(troikit(&["frobnicate"]).0, EXIT_USAGE);
    assert_eq!(troikit(&["train", "--troi-at", "conv9"]).0, EXIT_USAGE);
    assert_eq!(troikit(&["train", "--out", s(tmp.path())]).0, EXIT_USAGE);
    let missing = tmp.path().join("nope.ckpt");
    let (code, _, err) = troikit(&["eval", "--checkpoint", s(&missing), "--data", s(tmp.path())]);
    assert_eq!(code, EXIT_DATA);
    assert!(err.contains("nope.ckpt"));
    assert_eq!(troikit(&["--help"]).0, EXIT_OK);
}

#[test]
fn gradcheck_command() {
    let (code, out, _) = troikit(&["gradcheck", "--op", "relu"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("relu") && out.contains("PASS"));
    let (code, out, _) = troikit(&["gradcheck", "--op", "matmul", "--perturb", "0.01"]);
    assert_eq!(code, EXIT_CHECK);
    assert!(out.contains("FAIL"));
    assert_eq!(troikit(&["gradcheck", "--op", "fft"]).0, EXIT_USAGE);
}
