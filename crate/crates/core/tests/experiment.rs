use std::collections::BTreeMap;
use std::path::Path;

use autoci::experiment::{compute, emit_report, run_experiment, sub_seed, EvalReport, ExperimentConfig, ExperimentError, ExperimentKind, Format};

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn small_toy() -> ExperimentConfig {
    ExperimentConfig::from_toml(
        r#"
kind = "toy-finite"
seed = 11
replicates = 2
[scm]
n_vars = 3
[learner]
warmup_epochs = 3
"#,
    )
    .unwrap()
}

#[test]
fn toml_round_trip_and_defaults() {
    let c = ExperimentConfig::from_toml("kind = \"baselines\"\nseed = 4\nsetting = \"abcd\"\nformats = [\"json\"]").unwrap();
    assert_eq!(c.kind, ExperimentKind::Baselines);
    assert_eq!(c.seed, 4);
    assert_eq!(c.replicates, 1);
    assert_eq!(c.formats, vec![Format::Json]);
    assert_eq!(c.program, "COMP(nn, CAT(FILTER(pred)))");
    c.validate().unwrap();
    let back = ExperimentConfig::from_toml(&toml::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn unknown_fields_are_config_errors() {
    for src in [
        "kind = \"toy-finite\"\nreplicate = 3",
        "kind = \"toy-finite\"\n[scm]\nnvars = 3",
        "kind = \"toy-finite\"\n[learner]\nlearning_rate = 0.1",
        "kind = \"sideways\"",
    ] {
        let err = ExperimentConfig::from_toml(src).and_then(|c| c.validate());
        let err = err.expect_err(src);
        assert!(matches!(err, ExperimentError::Config(_)), "{src}: {err}");
        assert_eq!(err.exit_code(), 2);
    }
}

#[test]
fn invalid_values_are_rejected() {
    for src in [
        "kind = \"toy-finite\"\nreplicates = 0",
        "kind = \"toy-finite\"\nalpha = 1.5",
        "kind = \"toy-finite\"\nprogram = \"COMP(nn\"",
        "kind = \"toy-finite\"\n[learner]\nlr = -1.0",
    ] {
        let err = ExperimentConfig::from_toml(src).unwrap().validate().unwrap_err();
        assert_eq!(err.exit_code(), 2, "{src}");
    }
}

#[test]
fn learner_overrides_merge_onto_preset() {
    let c = ExperimentConfig::from_toml("kind = \"toy-abcd\"\n[learner]\nlambda = 3.0").unwrap();
    let l = c.learner_config().unwrap();
    assert_eq!(l.lambda, 3.0);
    assert_eq!(l.warmup_epochs, 40);
    assert_eq!(l.finetune_epochs, 5);
    assert!(l.average_eval);

    let s = ExperimentConfig::from_toml("kind = \"survival\"\n[learner]\nruns = 16").unwrap();
    let l = s.learner_config().unwrap();
    assert_eq!(l.runs, 16);
    assert!(!l.average_eval);
}

#[test]
fn sub_seeds_separate_streams() {
    let a: Vec<u64> = (0..32).map(|s| sub_seed(7, s)).collect();
    let mut b = a.clone();
    b.sort_unstable();
    b.dedup();
    assert_eq!(b.len(), a.len());
    assert_ne!(sub_seed(7, 1), sub_seed(8, 1));
    assert_eq!(sub_seed(7, 1), sub_seed(7, 1));
}

#[test]
fn single_replicate_has_zero_spread() {
    let mut c = small_toy();
    c.replicates = 1;
    let r = compute(&c).unwrap();
    assert_eq!(r.methods.len(), 3);
    for m in &r.methods {
        assert_eq!(m.replicates, 1);
        assert_eq!(m.std_js, 0.0);
        assert!((0.0..=1.0).contains(&m.mean_js));
    }
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut c = small_toy();
    c.out = a.path().to_path_buf();
    run_experiment(&c).unwrap();
    c.out = b.path().to_path_buf();
    c.workers = 1;
    run_experiment(&c).unwrap();
    let (fa, fb) = (read_dir(a.path()), read_dir(b.path()));
    assert!(fa.contains_key("report.json") && fa.contains_key("summary.csv"));
    assert_eq!(fa, fb);
}

#[test]
fn empty_report_writes_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    emit_report(&EvalReport::default(), &[Format::Csv], dir.path()).unwrap();
    let files = read_dir(dir.path());
    let names: Vec<&str> = files.keys().map(String::as_str).collect();
    assert_eq!(names, ["js_curve.csv", "replicates.csv", "summary.csv", "timing.csv"]);
    for (name, body) in &files {
        let text = String::from_utf8(body.clone()).unwrap();
        assert_eq!(text.lines().count(), 1, "{name}");
    }
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("taken");
    std::fs::write(&file, b"x").unwrap();
    let err = emit_report(&EvalReport::default(), &[Format::Csv], &file).unwrap_err();
    assert!(matches!(err, ExperimentError::Io { .. }));
    assert_eq!(err.exit_code(), 1);
}
