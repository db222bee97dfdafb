use std::fs;
use std::path::Path;

use fgnce::cli::{run_command, RunManifest, CHECKPOINT_FILE, MANIFEST_FILE, METRICS_FILE};

const SMALL: &str = "[data]\ntrain = 40\nval = 4\ntest = 16\n[train]\nbatch_size = 8\nepochs = 2\nwarmup_steps = 2\n";

fn run(args: &[&str]) -> i32 {
    run_command(std::iter::once("fgnce").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&[]), 2);
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["train"]), 2);
    assert_eq!(run(&["train", "--out", "x", "--variant", "fg_best"]), 2);
    assert_eq!(run(&["generate", "--out", "x", "--preset", "huge"]), 2);
    assert_eq!(run(&["ablate", "--out", "x", "--seeds", "many"]), 2);
}

#[test]
fn help_and_version_exit_with_zero() {
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["--version"]), 0);
    assert_eq!(run(&["train", "--help"]), 0);
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    assert_eq!(run(&["train", "--out", s(&dir.path().join("o")), "--dataset", s(&missing)]), 1);
    assert_eq!(run(&["eval", "--checkpoint", s(&missing)]), 1);
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "[train]\nlearning_rate = 1\n").unwrap();
    assert_eq!(run(&["generate", "--out", s(&dir.path().join("d")), "--config", s(&bad)]), 1);
    fs::write(&bad, "[train]\nbatch_size = 1\n").unwrap();
    assert_eq!(run(&["generate", "--out", s(&dir.path().join("d")), "--config", s(&bad)]), 1);
}

#[test]
fn gradcheck_passes() {
    assert_eq!(run(&["gradcheck", "--seed", "3"]), 0);
}

#[test]
fn generate_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("small.conf");
    fs::write(&conf, SMALL).unwrap();
    let ds = dir.path().join("ds");
    let out = dir.path().join("run");
    assert_eq!(run(&["generate", "--out", s(&ds), "--config", s(&conf)]), 0);
    assert_eq!(
        run(&["train", "--out", s(&out), "--dataset", s(&ds), "--config", s(&conf), "--variant", "fg_no_inv", "--deterministic"]),
        0
    );
    let manifest = RunManifest::load(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.config.train.variant.name(), "fg_no_inv");
    assert!(manifest.deterministic);
    assert_eq!(manifest.dataset.path, ds);
    assert_eq!(fs::read_to_string(out.join(METRICS_FILE)).unwrap().lines().count(), 3);

    let ckpt = out.join(CHECKPOINT_FILE);
    let eval_dir = dir.path().join("eval");
    assert_eq!(run(&["eval", "--checkpoint", s(&ckpt), "--out", s(&eval_dir)]), 0);
    assert!(eval_dir.join("eval.json").exists());

    // Resuming a finished run keeps its rows and changes nothing.
    let before = fs::read(&ckpt).unwrap();
    assert_eq!(run(&["train", "--out", s(&out), "--dataset", s(&ds), "--resume", s(&ckpt)]), 0);
    assert_eq!(fs::read(&ckpt).unwrap(), before);
    assert_eq!(fs::read_to_string(out.join(METRICS_FILE)).unwrap().lines().count(), 3);

    assert_eq!(run(&["diagnose", "--dataset", s(&ds), "--checkpoint", s(&ckpt), "--samples", "8", "--batch", "4"]), 0);

    // A changed dataset no longer matches the manifest digest.
    let split = ds.join("test.fgds");
    let mut bytes = fs::read(&split).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&split, bytes).unwrap();
    assert_eq!(run(&["eval", "--checkpoint", s(&ckpt)]), 1);
}

#[test]
fn train_without_dataset_generates_one() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("small.conf");
    fs::write(&conf, SMALL).unwrap();
    let out = dir.path().join("run");
    assert_eq!(run(&["train", "--out", s(&out), "--config", s(&conf), "--seed", "9"]), 0);
    let manifest = RunManifest::load(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.dataset.path, out.join("dataset"));
    assert_eq!(manifest.config.train.seed, 9);
}

#[test]
fn ablate_writes_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("small.conf");
    fs::write(&conf, SMALL.replace("epochs = 2", "epochs = 1")).unwrap();
    let out = dir.path().join("abl");
    assert_eq!(run(&["ablate", "--out", s(&out), "--config", s(&conf), "--seeds", "2", "--seed", "4"]), 0);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    assert!(csv.lines().skip(1).all(|l| l.contains(",4,") || l.contains(",5,")));
    assert_eq!(fs::read_to_string(out.join("ablation_summary.csv")).unwrap().lines().count(), 5);
    assert!(out.join("runs/fg_full_seed5.csv").exists());
}
