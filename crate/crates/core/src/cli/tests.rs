use clap::Parser;

use super::*;

fn cli(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("metaproto").chain(args.iter().copied())).unwrap()
}

fn run_ok(args: &[&str]) -> String {
    let mut out = Vec::new();
    run(&cli(args), &mut out).unwrap();
    String::from_utf8(out).unwrap()
}

fn run_err(args: &[&str]) -> Error {
    run(&cli(args), &mut Vec::new()).unwrap_err()
}

fn synth_into(dir: &Path) {
    let d = dir.to_str().unwrap();
    run_ok(&[
        "synth", "--out", d, "--classes", "4", "--per-class", "20", "--datasets", "2", "--channels", "4",
        "--seed", "7",
    ]);
}

fn tiny_train_args(manifest: &str, ckpt: &str, log: &str) -> Vec<String> {
    [
        "train", "--manifest", manifest, "--out", ckpt, "--log", log, "--extractor", "mean_fc", "--hidden", "6",
        "--layers", "1", "--embedding-dim", "8", "--probe-epochs", "1", "--batches-per-epoch", "4",
        "--accumulation", "2", "--max-epochs", "2", "--validation-episodes", "3", "--n-way", "4", "--k-shot",
        "2", "--query", "1", "--lr", "1e-3", "--seed", "3",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn synth_counts_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = |d: &Path| {
        vec![
            "synth".to_string(),
            "--out".into(),
            d.to_str().unwrap().into(),
            "--classes".into(),
            "4".into(),
            "--per-class".into(),
            "30".into(),
            "--datasets".into(),
            "2".into(),
            "--seed".into(),
            "7".into(),
        ]
    };
    let argv: Vec<String> = args(a.path());
    let refs: Vec<&str> = argv.iter().map(String::as_str).collect();
    let text = run_ok(&refs);
    assert!(text.contains("240 records"), "{text}");
    let argv: Vec<String> = args(b.path());
    let refs: Vec<&str> = argv.iter().map(String::as_str).collect();
    run_ok(&refs);
    let ma = std::fs::read(a.path().join("manifest.json")).unwrap();
    let mb = std::fs::read(b.path().join("manifest.json")).unwrap();
    assert_eq!(ma, mb);
    let records = crate::episodes::load_manifest(&a.path().join("manifest.json")).unwrap();
    for r in &records {
        let fa = std::fs::read(a.path().join(&r.path)).unwrap();
        let fb = std::fs::read(b.path().join(&r.path)).unwrap();
        assert_eq!(fa, fb);
    }
}

#[test]
fn synth_missing_directory_is_io_error() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("nope");
    let e = run_err(&["synth", "--out", missing.to_str().unwrap()]);
    assert!(matches!(e, Error::Io { .. }), "{e}");
    assert_eq!(e.exit_code(), 3);
    assert!(e.to_string().contains("nope"));
}

#[test]
fn config_rejects_unknown_keys() {
    let e = RunConfig::from_json(r#"{"seed": 1, "bogus": 2}"#).unwrap_err();
    assert!(matches!(e, Error::Config(_)));
    let e = RunConfig::from_json(r#"{"train": {"lr": 1e-3, "nope": 1}}"#).unwrap_err();
    assert!(e.to_string().contains("nope"));
    let c = RunConfig::from_json(r#"{"seed": 9, "extractor": {"kind": "lateral_inhibition"}}"#).unwrap();
    assert_eq!(c.seed, 9);
    assert_eq!(c.extractor.kind, ExtractorKind::LateralInhibition);
}

#[test]
fn readme_config_example_is_valid() {
    let readme = include_str!("../../../../README.md");
    let start = readme.find("```json\n").unwrap() + 8;
    let end = start + readme[start..].find("```").unwrap();
    let c = RunConfig::from_json(&readme[start..end]).unwrap();
    c.validate().unwrap();
    assert_eq!(c.extractor.kind, ExtractorKind::Glu);
    assert_eq!(c.train.episode.query_per_class, 15);
    assert_eq!(c.eval.finetune.variant, Variant::B);
}

#[test]
fn config_round_trips() {
    let c = RunConfig::default();
    let back = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn flags_override_config_file() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("run.json");
    std::fs::write(&p, r#"{"seed": 5, "train": {"lr": 0.5, "probe_epochs": 7}, "extractor": {"kind": "glu"}}"#)
        .unwrap();
    let Command::Train(args) = cli(&[
        "train", "--config", p.to_str().unwrap(), "--lr", "0.25", "--extractor", "li", "--dann", "--lambda", "0.1",
    ])
    .command
    else {
        unreachable!()
    };
    let cfg = train_config(&args).unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.train.lr, 0.25);
    assert_eq!(cfg.train.probe_epochs, 7);
    assert_eq!(cfg.extractor.kind, ExtractorKind::LateralInhibition);
    assert!(cfg.train.dann);
    assert_eq!(cfg.train.lambda, 0.1);
    let m = cfg.model_config(4, 3);
    assert_eq!(m.discriminator.unwrap().num_datasets, 3);
}

#[test]
fn defaults_follow_the_documented_settings() {
    let Command::Train(args) = cli(&["train"]).command else { unreachable!() };
    let cfg = train_config(&args).unwrap();
    assert_eq!(cfg.train.probe_epochs, 5);
    assert_eq!(cfg.train.lambda, 0.01);
    assert_eq!(cfg.extractor.kind, ExtractorKind::Glu);
    let Command::Sweep(s) = cli(&["sweep"]).command else { unreachable!() };
    let cfg = eval_config(&s.eval).unwrap();
    assert_eq!(cfg.sweep.grid.steps, vec![0, 1, 3, 5, 10, 15, 20, 25]);
    assert_eq!(cfg.sweep.grid.lrs, vec![1e-3, 1e-4, 1e-5, 1e-6]);
    assert_eq!(cfg.sweep.grid.support_sizes, vec![1, 2, 3, 4]);
}

#[test]
fn invalid_configuration_fails_before_compute() {
    // no manifest exists, so reaching the data stage would be an IO error
    let e = run_err(&["eval", "--k-shot", "1", "--ft-variant", "b", "--ft-steps", "3", "--manifest", "/nonexistent"]);
    assert!(matches!(e, Error::Config(_)), "{e}");
    assert_eq!(e.exit_code(), 2);
    let e = run_err(&["train", "--batches-per-epoch", "7", "--accumulation", "2", "--manifest", "/nonexistent"]);
    assert_eq!(e.exit_code(), 2);
    let e = run_err(&["train"]);
    assert!(e.to_string().contains("manifest"));
}

#[test]
fn parse_errors_exit_two() {
    assert_eq!(main_with_args(["metaproto", "train", "--extractor", "cnn"]), 2);
    assert_eq!(main_with_args(["metaproto", "frobnicate"]), 2);
}

#[test]
fn train_eval_sweep_inspect_end_to_end() {
    let d = tempfile::tempdir().unwrap();
    synth_into(d.path());
    let manifest = d.path().join("manifest.json");
    let ckpt = d.path().join("model.pepc");
    let log = d.path().join("train.jsonl");
    let argv = tiny_train_args(manifest.to_str().unwrap(), ckpt.to_str().unwrap(), log.to_str().unwrap());
    let refs: Vec<&str> = argv.iter().map(String::as_str).collect();
    let text = run_ok(&refs);
    assert!(text.contains("random initialisation"), "{text}");
    assert!(text.contains("extractor mean_fc"));
    let lines = std::fs::read_to_string(&log).unwrap();
    assert!(lines.lines().count() >= 2);
    for l in lines.lines() {
        serde_json::from_str::<serde_json::Value>(l).unwrap();
    }

    let report = d.path().join("eval");
    let common = [
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--n-way",
        "4",
        "--k-shot",
        "2",
        "--query",
        "1",
        "--episodes",
        "6",
    ];
    let mut args = vec!["eval", "--out", report.to_str().unwrap()];
    args.extend(common);
    let text = run_ok(&args);
    assert!(text.contains("overall"));
    let json = std::fs::read_to_string(with_ext(&report, "json")).unwrap();
    let r: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(r.episodes, 6);
    assert!(with_ext(&report, "txt").exists());
    // rerun is byte-identical
    run_ok(&args);
    assert_eq!(std::fs::read_to_string(with_ext(&report, "json")).unwrap(), json);

    let mut args = vec!["eval", "--ft-variant", "b", "--ft-steps", "2", "--ft-support", "1", "--ft-lr", "1e-3"];
    args.extend(common);
    run_ok(&args);

    let sweep_out = d.path().join("sweep");
    let mut args = vec![
        "sweep", "--out", sweep_out.to_str().unwrap(), "--steps", "0,1", "--lrs", "1e-3", "--support-sizes", "1",
        "--split", "test",
    ];
    args.extend(common);
    let text = run_ok(&args);
    assert!(text.contains("best:"));

    let t = run_ok(&["inspect", ckpt.to_str().unwrap()]);
    assert!(t.contains("theta_m") && t.contains("theta_f") && t.contains("parameters"), "{t}");
    let t = run_ok(&["inspect", manifest.to_str().unwrap()]);
    assert!(t.contains("synth-d0") && t.contains("train"), "{t}");
    let t = run_ok(&["inspect", with_ext(&report, "json").to_str().unwrap()]);
    assert!(t.contains("overall"));
    let t = run_ok(&["inspect", with_ext(&sweep_out, "json").to_str().unwrap()]);
    assert!(t.contains("best:"));
    let junk = d.path().join("junk.bin");
    std::fs::write(&junk, b"hello").unwrap();
    let e = run_err(&["inspect", junk.to_str().unwrap()]);
    assert_eq!(e.exit_code(), 3);
}
