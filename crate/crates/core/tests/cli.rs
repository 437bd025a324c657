use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
sweep_seeds = [0]
world.num_identities = 10
train.epochs = 2
train.steps_per_epoch = 4
train.hidden = [16, 16, 16, 16, 16]
train.lambda = 1.0
train.negatives = 4
train.probe_episodes = 16
fusion.epochs = 2
fusion.sessions = 16
fusion.session_frames = 80
fusion.window = 10
fusion.hidden = 6
fusion.regressor.steps = 40
eval.sessions = 10
eval.session_frames = 80
"#;

fn ebl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ebl"))
        .args(args)
        .current_dir(dir)
        .env_remove("EBL_SEED")
        .output()
        .expect("run ebl")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ebl(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = ebl(dir, args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn workspace(config: &str) -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("c.toml"), config).unwrap();
    d
}

/// Runs every command once, returning (stdout lines, output files).
fn full_chain(dir: &Path) -> (Vec<String>, Vec<(PathBuf, Vec<u8>)>) {
    let mut stdout = Vec::new();
    let c = ["--config", "c.toml"];
    let mut run = |args: &[&str]| stdout.push(ok(dir, &[args, &c[..]].concat()));
    run(&["gen-world", "--out", "w.bin"]);
    run(&["train-ebl", "--world", "w.bin", "--out", "e.ckpt", "--report", "r.csv"]);
    run(&["train-fusion", "--world", "w.bin", "--ebl", "e.ckpt", "--out", "l.ckpt"]);
    run(&["eval", "--world", "w.bin", "--ebl", "e.ckpt", "--lstm", "l.ckpt", "--split", "test", "--out", "ev.csv"]);
    run(&["simulate", "--world", "w.bin", "--attack", "--out", "a.ebls"]);
    run(&["simulate", "--world", "w.bin", "--self", "--out", "s.ebls"]);
    run(&["detect", "--stream", "a.ebls", "--ebl", "e.ckpt", "--lstm", "l.ckpt", "--out", "a.json"]);
    run(&["sweep", "--kind", "window", "--grid", "5,10", "--out", "sw.csv"]);
    stdout.push(ok(dir, &["verify-margin", "--trials", "2000", "--dim", "16"]));
    let mut files: Vec<(PathBuf, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (PathBuf::from(p.file_name().unwrap()), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    (stdout, files)
}

#[test]
fn every_command_is_byte_deterministic() {
    let (a, b) = (workspace(TINY), workspace(TINY));
    let (out_a, files_a) = full_chain(a.path());
    let (out_b, files_b) = full_chain(b.path());
    assert_eq!(out_a, out_b);
    assert_eq!(files_a.len(), 12);
    assert_eq!(files_a, files_b);
    let d = a.path();
    assert!(out_a[3].starts_with("auc="));
    let rows = fs::read_to_string(d.join("ev.csv")).unwrap().lines().count();
    assert_eq!(rows, 11);
    let sweep = fs::read_to_string(d.join("sw.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "setting,auc,seed");
    assert_eq!(lines.len(), 3);
    assert!(out_a.last().unwrap().contains("violations=0"));
}

#[test]
fn simulate_labels_and_detect_round_trip() {
    let w = workspace(TINY);
    let d = w.path();
    let c = ["--config", "c.toml"];
    ok(d, &[&["gen-world", "--out", "w.bin"][..], &c].concat());
    ok(d, &[&["train-ebl", "--world", "w.bin", "--out", "e.ckpt"][..], &c].concat());
    ok(d, &[&["train-fusion", "--world", "w.bin", "--ebl", "e.ckpt", "--out", "l.ckpt"][..], &c].concat());
    for (flag, label) in [("--attack", 1), ("--self", 0)] {
        ok(d, &[&["simulate", "--world", "w.bin", flag, "--out", "x.ebls"][..], &c].concat());
        let meta: serde_json::Value = serde_json::from_slice(&fs::read(d.join("x.ebls.meta.json")).unwrap()).unwrap();
        assert_eq!(meta["label"], label);
        assert_eq!(meta["driving_id"] != meta["target_id"], label == 1);
        ok(d, &[&["detect", "--stream", "x.ebls", "--ebl", "e.ckpt", "--lstm", "l.ckpt", "--out", "x.json"][..], &c].concat());
        let rep: serde_json::Value = serde_json::from_slice(&fs::read(d.join("x.json")).unwrap()).unwrap();
        assert_eq!(rep["session_id"], meta["session_id"]);
        assert!(rep["windows"].as_u64().unwrap() >= 1);
    }
    let bytes = fs::read(d.join("x.ebls")).unwrap();
    fs::write(d.join("cut.ebls"), &bytes[..bytes.len() - 7]).unwrap();
    let detect = |s: &str| code(d, &[&["detect", "--stream", s, "--ebl", "e.ckpt", "--lstm", "l.ckpt", "--out", "y.json"][..], &c].concat());
    let (rc, err) = detect("cut.ebls");
    assert_eq!(rc, 3);
    assert!(err.to_lowercase().contains("truncated"), "{err}");
    let mut flipped = bytes.clone();
    flipped[200] ^= 0x40;
    fs::write(d.join("bad.ebls"), flipped).unwrap();
    let (rc, err) = detect("bad.ebls");
    assert_eq!(rc, 3);
    assert!(err.contains("CRC"), "{err}");
}

#[test]
fn usage_and_data_errors_map_to_exit_codes() {
    let w = workspace(TINY);
    let d = w.path();
    let c = ["--config", "c.toml"];
    assert_eq!(code(d, &["gen-world", "--config", "missing.toml", "--out", "w.bin"]).0, 2);
    assert_eq!(code(d, &["frobnicate"]).0, 2);
    ok(d, &[&["gen-world", "--out", "w.bin"][..], &c].concat());

    fs::write(d.join("lam.toml"), format!("{TINY}\ntrain.lambda = 0.0\n").replace("train.lambda = 1.0\n", "")).unwrap();
    assert_eq!(code(d, &["train-ebl", "--world", "w.bin", "--config", "lam.toml", "--out", "e"]).0, 2);
    fs::write(d.join("lam2.toml"), TINY.replace("train.lambda = 1.0", "train.lambda = 1.5")).unwrap();
    assert_eq!(code(d, &["train-ebl", "--world", "w.bin", "--config", "lam2.toml", "--out", "e"]).0, 2);
    fs::write(d.join("unk.toml"), format!("{TINY}\ntrain.lamda = 0.5\n")).unwrap();
    assert_eq!(code(d, &["train-ebl", "--world", "w.bin", "--config", "unk.toml", "--out", "e"]).0, 2);

    assert_eq!(code(d, &[&["train-fusion", "--world", "w.bin", "--ebl", "none.ckpt", "--out", "l"][..], &c].concat()).0, 2);
    ok(d, &[&["train-ebl", "--world", "w.bin", "--out", "e.ckpt"][..], &c].concat());
    fs::write(d.join("w0.toml"), TINY.replace("fusion.window = 10", "fusion.window = 0")).unwrap();
    assert_eq!(code(d, &["train-fusion", "--world", "w.bin", "--ebl", "e.ckpt", "--config", "w0.toml", "--out", "l"]).0, 2);

    assert_eq!(code(d, &["verify-margin", "--epsilon", "0.5", "--gamma", "0.5"]).0, 2);
    assert_eq!(code(d, &["verify-margin", "--trials", "0"]).0, 2);
    assert_eq!(code(d, &[&["sweep", "--kind", "window", "--grid", "", "--out", "s.csv"][..], &c].concat()).0, 2);
    assert_eq!(code(d, &[&["sweep", "--kind", "depth", "--grid", "1", "--out", "s.csv"][..], &c].concat()).0, 2);

    ok(d, &[&["train-fusion", "--world", "w.bin", "--ebl", "e.ckpt", "--out", "l.ckpt"][..], &c].concat());
    fs::write(d.join("one.toml"), TINY.replace("eval.sessions = 10", "eval.sessions = 1")).unwrap();
    let (rc, err) = code(d, &["eval", "--world", "w.bin", "--ebl", "e.ckpt", "--lstm", "l.ckpt", "--config", "one.toml", "--out", "o.csv"]);
    assert_eq!(rc, 3, "{err}");
    let mut ckpt = fs::read(d.join("e.ckpt")).unwrap();
    ckpt[40] ^= 1;
    fs::write(d.join("bad.ckpt"), ckpt).unwrap();
    assert_eq!(code(d, &[&["train-fusion", "--world", "w.bin", "--ebl", "bad.ckpt", "--out", "l"][..], &c].concat()).0, 3);
}

#[test]
fn printed_config_is_complete_and_reloadable() {
    let w = workspace(TINY);
    let d = w.path();
    let printed = ok(d, &["--print-config"]);
    assert!(printed.lines().all(|l| l.contains(" = ") && !l.starts_with('[')));
    for key in ["train.lambda = 0.23", "fusion.window = 40", "world.leakage_gain = 0.35", "detect.threshold = 0.5"] {
        assert!(printed.lines().any(|l| l == key), "missing {key}");
    }
    fs::write(d.join("full.toml"), &printed).unwrap();
    let parsed: toml::Value = toml::from_str(&printed).unwrap();
    assert_eq!(parsed["world"]["num_identities"].as_integer(), Some(46));
    ok(d, &["gen-world", "--config", "full.toml", "--out", "a.bin"]);
    ok(d, &["gen-world", "--out", "b.bin"]);
    assert_eq!(fs::read(d.join("a.bin")).unwrap(), fs::read(d.join("b.bin")).unwrap());
}

#[test]
fn seed_precedence_is_flag_then_env_then_file() {
    let w = workspace("seed = 7\nworld.num_identities = 6\n");
    let d = w.path();
    let gen = |out: &str, flag: Option<&str>, env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ebl"));
        cmd.current_dir(d).env_remove("EBL_SEED").args(["gen-world", "--config", "c.toml", "--out", out]);
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        if let Some(e) = env {
            cmd.env("EBL_SEED", e);
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read(d.join(out)).unwrap()
    };
    let file7 = gen("a", None, None);
    let env8 = gen("b", None, Some("8"));
    let flag9 = gen("c", Some("9"), Some("8"));
    fs::write(d.join("c.toml"), "seed = 8\nworld.num_identities = 6\n").unwrap();
    assert_eq!(gen("d", None, None), env8);
    fs::write(d.join("c.toml"), "seed = 9\nworld.num_identities = 6\n").unwrap();
    assert_eq!(gen("e", None, None), flag9);
    assert_ne!(file7, env8);
    assert_ne!(env8, flag9);
}
