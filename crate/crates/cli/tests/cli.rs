use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn irnn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irnn"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn gen_adding(dir: &Path, t: &str) {
    let out = irnn(&["gen-adding", "--t", t, "--n-train", "64", "--n-test", "32", "--out", "d"], dir);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

const ADDING_DATA: [&str; 3] = ["--data", "d/train.addp", "d/test.addp"];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&irnn(&["--help"], dir.path())), 0);
    assert_eq!(code(&irnn(&["--version"], dir.path())), 0);
    assert_eq!(code(&irnn(&["train", "--help"], dir.path())), 0);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen_adding(p, "10");
    let train = with(&["train", "--task", "adding", "--out-dir", "r"], &ADDING_DATA);
    let cases: Vec<Vec<&str>> = vec![
        vec![],
        vec!["frobnicate"],
        with(&train, &["--no-such-flag"]),
        with(&train, &["--cell", "lstm", "--init", "identity"]),
        with(&train, &["--cell", "lstm", "--activation", "relu"]),
        with(&train, &["--cell", "rnn", "--forget-bias", "1"]),
        with(&train, &["--permute-seed", "3"]),
        with(&train, &["--downsample", "14"]),
        vec!["train", "--task", "adding", "--out-dir", "r", "--data", "d/train.addp"],
        vec!["train", "--task", "adding", "--data", "d/train.addp", "d/test.addp"],
        vec!["gen-adding", "--t", "1", "--out", "x"],
        vec!["gradcheck", "--cell", "rnn", "--forget-bias", "2"],
        vec!["gradcheck", "--cell", "lstm", "--activation", "relu"],
    ];
    for args in cases {
        let out = irnn(&args, p);
        assert_eq!(code(&out), 1, "{args:?}: {}", stderr(&out));
    }
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = irnn(&["train", "--task", "adding", "--out-dir", "r", "--data", "missing.addp", "m2.addp"], p);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    fs::write(p.join("junk.addp"), b"not an adding file").unwrap();
    let out = irnn(&["eval", "--checkpoint", "junk.addp", "--data", "junk.addp"], p);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen_adding(p, "80");
    let args = with(
        &["train", "--task", "adding", "--activation", "linear", "--init", "iscale:50", "--hidden", "4"],
        &["--steps", "5", "--out-dir", "r", "--data", "d/train.addp", "d/test.addp"],
    );
    let out = irnn(&args, p);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"));
    assert!(p.join("r/manifest.json").exists());
}

#[test]
fn gen_adding_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for out in ["a", "b"] {
        let o = irnn(&["gen-adding", "--t", "20", "--n-train", "50", "--n-test", "10", "--seed", "7", "--out", out], p);
        assert_eq!(code(&o), 0);
        assert!(String::from_utf8_lossy(&o.stdout).contains("baseline_mse"));
    }
    for f in ["train.addp", "test.addp"] {
        assert_eq!(fs::read(p.join("a").join(f)).unwrap(), fs::read(p.join("b").join(f)).unwrap());
    }
    let o = irnn(&["gen-adding", "--t", "20", "--n-train", "50", "--n-test", "10", "--seed", "8", "--out", "c"], p);
    assert_eq!(code(&o), 0);
    assert_ne!(fs::read(p.join("a/train.addp")).unwrap(), fs::read(p.join("c/train.addp")).unwrap());
}

#[test]
fn make_perm_is_deterministic_permutation() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for out in ["p1.json", "p2.json"] {
        assert_eq!(code(&irnn(&["make-perm", "--side", "14", "--seed", "5", "--out", out], p)), 0);
    }
    let a = fs::read_to_string(p.join("p1.json")).unwrap();
    assert_eq!(a, fs::read_to_string(p.join("p2.json")).unwrap());
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    let mut perm: Vec<u64> = v["permutation"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
    perm.sort_unstable();
    assert_eq!(perm, (0..196).collect::<Vec<u64>>());
}

#[test]
fn train_then_eval_adding() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen_adding(p, "10");
    let args = with(
        &["train", "--task", "adding", "--cell", "lstm", "--hidden", "4", "--steps", "20", "--eval-every", "10"],
        &["--out-dir", "r", "--data", "d/train.addp", "d/test.addp"],
    );
    let out = irnn(&args, p);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(p.join("r/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("r/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["forget_bias"], 1.0);
    assert_eq!(manifest["data"].as_array().unwrap().len(), 2);

    let out = irnn(&["eval", "--checkpoint", "r/checkpoint.bin", "--data", "d/test.addp"], p);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["metric"], "rmse");
    let loss = v["loss"].as_f64().unwrap();
    let last_test = csv.lines().last().unwrap().split(',').nth(2).unwrap().parse::<f64>().unwrap();
    assert_eq!(loss.to_bits(), last_test.to_bits());
}

#[test]
fn replay_refuses_changed_data() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen_adding(p, "10");
    let args = with(&["train", "--task", "adding", "--hidden", "3", "--steps", "2", "--out-dir", "r"], &ADDING_DATA);
    assert_eq!(code(&irnn(&args, p)), 0);
    let conflict = irnn(&["train", "--manifest", "r/manifest.json", "--lr", "0.5"], p);
    assert_eq!(code(&conflict), 1);
    fs::write(p.join("d/test.addp"), b"changed").unwrap();
    let out = irnn(&["train", "--manifest", "r/manifest.json", "--out-dir", "r2"], p);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("changed"));
}

fn write_idx(dir: &Path, n: u32) {
    let mut images = vec![0, 0, 8, 3];
    for x in [n, 28, 28] {
        images.extend_from_slice(&x.to_be_bytes());
    }
    images.extend((0..n as usize * 784).map(|i| (i * 37 % 256) as u8));
    let mut labels = vec![0, 0, 8, 1];
    labels.extend_from_slice(&n.to_be_bytes());
    labels.extend((0..n).map(|i| (i % 10) as u8));
    fs::write(dir.join("images"), images).unwrap();
    fs::write(dir.join("labels"), labels).unwrap();
}

#[test]
fn untrained_softmax_checkpoint_scores_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_idx(p, 40);
    let args = [
        "train", "--task", "mnist", "--hidden", "8", "--downsample", "7", "--permute-seed", "2", "--steps", "0",
        "--out-dir", "r", "--data", "images", "labels", "images", "labels",
    ];
    let out = irnn(&args, p);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(p.join("r/permutation.json").exists());

    let out = irnn(
        &["eval", "--checkpoint", "r/checkpoint.bin", "--downsample", "7", "--permute-seed", "2", "--data", "images", "labels"],
        p,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["metric"], "accuracy");
    assert_eq!(v["examples"], 40);
    let loss = v["loss"].as_f64().unwrap();
    assert!((loss - 10f64.ln()).abs() < 0.05, "loss {loss}");
}

#[test]
fn gradcheck_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    for cell in [["--cell", "rnn"], ["--cell", "lstm"]] {
        let out = irnn(&["gradcheck", cell[0], cell[1], "--trials", "3"], dir.path());
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    }
}
