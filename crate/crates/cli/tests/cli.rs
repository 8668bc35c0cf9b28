use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 9

[mapping]
kind = "multi-linear"

[optimizer]
max_iterations = 15

[time]
warmup = 12
split = 100

[output]
dir = "twin"

[twin]
nrows = 8
ncols = 8
nt = 150
n_descriptors = 2
noise = 0.03
n_calibration = 2
n_validation = 1
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regiohydro"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn regiohydro")
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let key = path.strip_prefix(dir).unwrap().display().to_string();
                files.insert(key, fs::read(&path).unwrap());
            }
        }
    }
    files
}

/// Runs every command in a fresh directory and returns stdout per command
/// (with the directory stripped) plus every file written.
fn session(dir: &Path) -> (Vec<String>, BTreeMap<String, Vec<u8>>) {
    fs::write(dir.join("twin.toml"), CONFIG).unwrap();
    let commands: [&[&str]; 4] = [
        &["twin", "twin.toml"],
        &["calibrate", "twin/calibrate.toml"],
        &["validate", "twin/calibrate.toml", "twin/truth_control.txt"],
        &["gradcheck", "twin/calibrate.toml", "--cells", "6"],
    ];
    let prefix = dir.display().to_string();
    let mut stdout = Vec::new();
    for args in commands {
        let out = run(dir, args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        stdout.push(String::from_utf8(out.stdout).unwrap().replace(&prefix, "<dir>"));
    }
    (stdout, snapshot(dir))
}

#[test]
fn every_command_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (out_a, files_a) = session(a.path());
    let (out_b, files_b) = session(b.path());
    assert_eq!(out_a, out_b);
    assert_eq!(files_a.keys().collect::<Vec<_>>(), files_b.keys().collect::<Vec<_>>());
    for (name, bytes) in &files_a {
        assert!(files_b[name] == *bytes, "{name} differs");
    }
    for expected in [
        "twin/calibrate.toml",
        "twin/calibration/control.txt",
        "twin/calibration/trace.csv",
        "twin/calibration/metrics.csv",
        "twin/calibration/gradcheck.csv",
    ] {
        assert!(files_a.contains_key(expected), "missing {expected}");
    }
}

#[test]
fn truth_control_validates_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let (stdout, _) = session(dir.path());
    let validation = &stdout[2];
    for line in validation.lines().filter(|l| l.starts_with("Cal ")) {
        let nse: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
        assert!(nse > 0.9, "{line}");
    }
}

#[test]
fn input_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = run(dir.path(), &["calibrate", "nope.toml"]);
    assert_eq!(missing.status.code(), Some(1));

    fs::write(dir.path().join("bad.toml"), "seed = \"x\"\n").unwrap();
    let malformed = run(dir.path(), &["calibrate", "bad.toml"]);
    assert_eq!(malformed.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&malformed.stderr).contains("error"));

    fs::write(dir.path().join("twin.toml"), CONFIG).unwrap();
    assert_eq!(run(dir.path(), &["twin", "twin.toml"]).status.code(), Some(0));
    fs::write(dir.path().join("control.txt"), "kind ann\nshape 1\n").unwrap();
    let bad_control = run(dir.path(), &["validate", "twin/calibrate.toml", "control.txt"]);
    assert_eq!(bad_control.status.code(), Some(1));
}

#[test]
fn failed_gradient_check_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("twin.toml"), CONFIG).unwrap();
    assert_eq!(run(dir.path(), &["twin", "twin.toml"]).status.code(), Some(0));
    let out = run(
        dir.path(),
        &["gradcheck", "twin/calibrate.toml", "--cells", "4", "--tolerance", "0"],
    );
    assert_eq!(out.status.code(), Some(2));
}
