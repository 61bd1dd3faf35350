use std::process::Command;

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_metaproto")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn help_exits_zero() {
    let (code, stdout, _) = run(&["--help"]);
    assert_eq!(code, 0);
    for cmd in ["synth", "train", "eval", "sweep", "inspect"] {
        assert!(stdout.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["frobnicate"]).0, 2);
    assert_eq!(run(&["train", "--extractor", "cnn"]).0, 2);
}

#[test]
fn synth_then_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let (code, stdout, stderr) = run(&[
        "synth", "--out", d, "--classes", "3", "--per-class", "10", "--datasets", "2", "--channels", "4", "--seed", "2",
    ]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("wrote 60 records"), "{stdout}");
    let manifest = dir.path().join("manifest.json");
    let (code, stdout, _) = run(&["inspect", manifest.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(stdout.contains("synth"));
}

#[test]
fn missing_and_malformed_files_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.pepc");
    let (code, _, stderr) = run(&["inspect", missing.to_str().unwrap()]);
    assert_eq!(code, 3);
    assert!(stderr.starts_with("error: "));
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(run(&["inspect", junk.to_str().unwrap()]).0, 3);
}
