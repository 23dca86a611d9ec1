use std::fs;
use std::path::Path;

use splitpu::data::DataError;
use splitpu::harness::{
    analyze_split, apply_env_overrides, parse_spec, read_raw_csv, run, summarize, validate_config,
    DatasetSpec, ExperimentSpec, HarnessError, SummaryRow, FOOTNOTE,
};
use splitpu::pipeline::TrainConfig;

const TINY: &str = r#"{
    "dataset": {"kind": "gaussians", "n_pos": 60, "n_neg": 90, "test_pos": 40, "test_neg": 60},
    "n_p": 10,
    "seeds": [0, 1, 2, 3, 4],
    "train": {
        "base": {"optimizer": {"kind": "adam", "lr": 0.01}, "epochs": 3, "batch_size": 16},
        "temp": {"optimizer": {"kind": "sgd", "lr": 0.05, "momentum": 0.9}, "max_epochs": 4, "batch_size": 16},
        "student": {"optimizer": {"kind": "adam", "lr": 0.01}, "epochs": 2, "batch_size": 16},
        "iterations": 1
    }
}"#;

fn tiny(out: &Path) -> ExperimentSpec {
    let mut spec = parse_spec(TINY).unwrap();
    spec.out_dir = out.to_path_buf();
    spec
}

fn config_key(e: HarnessError) -> String {
    match e {
        HarnessError::Config { key, .. } => key,
        other => panic!("expected a config error, got {other}"),
    }
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn empty_config_gives_full_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let spec = validate_config(write(dir.path(), "c.json", "{}")).unwrap();
    assert_eq!(spec, ExperimentSpec::default());
    assert_eq!(spec.train.tau, 0.92);
    assert_eq!(spec.train.rho, 0.7);
    assert_eq!(spec.train.alpha, 0.3);
    assert_eq!(spec.train.beta, 0.1);
    assert_eq!(spec.train.iterations, 2);
    assert_eq!(spec.seeds, vec![0, 1, 2, 3, 4]);
}

#[test]
fn tau_echoed_unchanged() {
    let spec = parse_spec(r#"{"train": {"tau": 0.92}}"#).unwrap();
    assert_eq!(spec.train.tau, 0.92);
    assert_eq!(serde_json::to_value(&spec).unwrap()["train"]["tau"], 0.92);
}

#[test]
fn unknown_keys_rejected() {
    for (text, needle) in [
        (r#"{"bogus": 1}"#, "bogus"),
        (r#"{"train": {"bogus": 1}}"#, "bogus"),
        (r#"{"sweep": {"gamma": [1]}}"#, "gamma"),
        (
            r#"{"dataset": {"kind": "gaussians", "radius": 2}}"#,
            "radius",
        ),
    ] {
        let e = parse_spec(text).unwrap_err();
        assert!(e.to_string().contains(needle), "{text}: {e}");
    }
}

#[test]
fn type_errors_carry_key_paths() {
    assert_eq!(
        config_key(parse_spec(r#"{"train": {"rho": "high"}}"#).unwrap_err()),
        "train.rho"
    );
    assert_eq!(
        config_key(parse_spec(r#"{"seeds": [0, "one"]}"#).unwrap_err()),
        "seeds[1]"
    );
    // Internally tagged enums are buffered, so the path ends at the enum itself.
    assert_eq!(
        config_key(
            parse_spec(
                r#"{"train": {"base": {"optimizer": {"kind": "adam", "lr": "x"}, "epochs": 1}}}"#
            )
            .unwrap_err()
        ),
        "train.base.optimizer"
    );
}

#[test]
fn out_of_range_values_carry_key_paths() {
    let dir = tempfile::tempdir().unwrap();
    let check =
        |text: &str| config_key(validate_config(write(dir.path(), "c.json", text)).unwrap_err());
    assert_eq!(check(r#"{"train": {"rho": 1.0}}"#), "train.rho");
    assert_eq!(check(r#"{"train": {"tau": 1.5}}"#), "train.tau");
    assert_eq!(check(r#"{"sweep": {"rho": [0.5, 1.0]}}"#), "sweep.rho[1]");
    assert_eq!(check(r#"{"sweep": {"tau": []}}"#), "sweep.tau");
    assert_eq!(check(r#"{"seeds": []}"#), "seeds");
    assert_eq!(check(r#"{"seeds": [1, 1]}"#), "seeds");
    assert_eq!(check(r#"{"n_p": 5000}"#), "n_p");
    assert_eq!(
        check(r#"{"train": {"student": {"optimizer": {"kind": "adam", "lr": 0}, "epochs": 3}}}"#),
        "train.student.optimizer.lr"
    );
}

#[test]
fn relative_dataset_paths_resolve_against_config() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{"dataset": {"kind": "idx", "train_images": "a.idx", "train_labels": "b.idx",
                   "test_images": "/abs/c.idx", "test_labels": "d.idx"}}"#;
    let spec = validate_config(write(dir.path(), "c.json", text)).unwrap();
    match spec.dataset {
        DatasetSpec::Idx {
            train_images,
            test_images,
            ..
        } => {
            assert_eq!(train_images, dir.path().join("a.idx"));
            assert_eq!(test_images, Path::new("/abs/c.idx"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn env_overrides_output_and_jobs() {
    let mut spec = ExperimentSpec::default();
    std::env::set_var("SPLITPU_OUT_DIR", "/tmp/elsewhere");
    std::env::set_var("SPLITPU_JOBS", "3");
    apply_env_overrides(&mut spec).unwrap();
    std::env::set_var("SPLITPU_JOBS", "many");
    let bad = apply_env_overrides(&mut spec.clone());
    std::env::remove_var("SPLITPU_OUT_DIR");
    std::env::remove_var("SPLITPU_JOBS");
    assert_eq!(spec.out_dir, Path::new("/tmp/elsewhere"));
    assert_eq!(spec.jobs, 3);
    assert_eq!(config_key(bad.unwrap_err()), "SPLITPU_JOBS");
}

#[test]
fn unreadable_dataset_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny(&dir.path().join("out"));
    spec.dataset = DatasetSpec::Idx {
        train_images: dir.path().join("missing-images.idx"),
        train_labels: dir.path().join("missing-labels.idx"),
        test_images: dir.path().join("missing-images.idx"),
        test_labels: dir.path().join("missing-labels.idx"),
        positive_classes: vec![0, 1, 2, 3, 4],
        max_label: 9,
    };
    assert!(matches!(run(&spec), Err(HarnessError::Data(_))));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn grid_of_two_taus_and_five_seeds_gives_ten_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny(dir.path());
    spec.sweep.tau = Some(vec![0.8, 0.9]);
    let out = run(&spec).unwrap();
    assert_eq!(out.cells.len(), 2);
    assert_eq!(out.reports.len(), 10);
    assert!(out.reports.iter().all(|r| r.is_ok()));
    let mut n = 0;
    for c in &out.cells {
        for s in &spec.seeds {
            let d = dir
                .path()
                .join("runs")
                .join(c.name.replace(',', "_"))
                .join(format!("seed-{s}"));
            assert!(d.join("report.json").is_file(), "{}", d.display());
            assert!(d.join("curves.csv").is_file());
            assert!(d.join("model-0.spun").is_file() && d.join("model-1.spun").is_file());
            n += 1;
        }
    }
    assert_eq!(n, 10);
    // Every report echoes its cell's settings and exposes per-iteration accuracy.
    for r in &out.reports {
        let tau = if r.cell == "tau=0.8" { 0.8 } else { 0.9 };
        assert_eq!(r.config.tau, tau);
        assert_eq!(r.iterations.len(), 2);
    }
}

#[test]
fn summary_recomputed_from_raw_matches_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny(dir.path());
    spec.sweep.hard_loss = Some(vec![
        splitpu::losses::HardLossKind::No,
        splitpu::losses::HardLossKind::Dual,
    ]);
    spec.seeds = vec![0, 1, 2];
    run(&spec).unwrap();
    let raw = read_raw_csv(dir.path().join("raw.csv")).unwrap();
    assert_eq!(raw.len(), 2 * 3 * 2);
    let mut rd = csv::Reader::from_path(dir.path().join("summary.csv")).unwrap();
    let emitted: Vec<SummaryRow> = rd.deserialize().collect::<Result<_, _>>().unwrap();
    let body: Vec<SummaryRow> = emitted.into_iter().filter(|r| r.cell != FOOTNOTE).collect();
    assert_eq!(body, summarize(&raw));
    // Direct arithmetic on the final-iteration rows.
    for row in &body {
        let accs: Vec<f64> = raw
            .iter()
            .filter(|r| r.cell == row.cell && r.iteration == 1)
            .map(|r| r.accuracy)
            .collect();
        let m = accs.iter().sum::<f64>() / accs.len() as f64;
        assert_eq!(row.mean, Some(m));
        assert_eq!(row.n, Some(3));
    }
    let md = fs::read_to_string(dir.path().join("summary.md")).unwrap();
    assert!(md.starts_with("| hard_loss | base | iter 1 | n |"));
    assert_eq!(md.lines().count(), 4);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut sa = tiny(a.path());
    sa.seeds = vec![3, 4];
    sa.jobs = 1;
    let mut sb = sa.clone();
    sb.out_dir = b.path().to_path_buf();
    sb.jobs = 2;
    run(&sa).unwrap();
    run(&sb).unwrap();
    for f in [
        "raw.csv",
        "summary.csv",
        "iteration_summary.csv",
        "summary.md",
    ] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    for s in [3, 4] {
        for f in ["model-0.spun", "model-1.spun", "curves.csv"] {
            let rel = Path::new("runs/base").join(format!("seed-{s}")).join(f);
            assert_eq!(
                fs::read(a.path().join(&rel)).unwrap(),
                fs::read(b.path().join(&rel)).unwrap(),
                "{}",
                rel.display()
            );
        }
    }
}

#[test]
fn split_analysis_requires_analysis_mode() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny(dir.path());
    assert!(!spec.analysis);
    match analyze_split(&spec) {
        Err(HarnessError::Data(DataError::LabelLeak)) => {}
        other => panic!("expected the label-leak guard, got {:?}", other.map(|_| ())),
    }
    assert!(!dir.path().join("split_quality.csv").exists());
}

#[test]
fn split_analysis_writes_one_row_per_tau() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny(dir.path());
    spec.analysis = true;
    spec.seeds = vec![0, 1];
    let a = analyze_split(&spec).unwrap();
    assert_eq!(a.taus.len(), 5);
    let text = fs::read_to_string(dir.path().join("split_quality.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 5);
    for s in &a.seeds {
        assert_eq!(s.rows.len(), 5);
        let per_seed = fs::read_to_string(
            dir.path()
                .join(format!("split_analysis/seed-{}.csv", s.seed)),
        )
        .unwrap();
        assert_eq!(per_seed.lines().count(), 1 + 5);
        for (q, acc) in &s.rows {
            assert_eq!(q.n_easy + q.n_hard, 140);
            assert!(acc.is_some());
        }
    }
}

#[test]
fn split_analysis_at_configured_tau_matches_pipeline_split() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny(dir.path());
    spec.analysis = true;
    spec.analysis_students = false;
    spec.seeds = vec![2];
    spec.analysis_taus = vec![spec.train.tau];
    let a = analyze_split(&spec).unwrap();
    let q = &a.seeds[0].rows[0].0;
    let out = run(&ExperimentSpec {
        out_dir: dir.path().join("run"),
        ..spec.clone()
    })
    .unwrap();
    let split = out.reports[0].iterations[1].split.as_ref().unwrap();
    assert_eq!(
        (split.n_easy, split.n_hard, split.stop_epoch),
        (q.n_easy, q.n_hard, q.stop_epoch)
    );
}

#[test]
fn training_config_defaults_round_trip() {
    let cfg: TrainConfig = serde_json::from_str("{}").unwrap();
    assert_eq!(cfg, TrainConfig::default());
    let back: TrainConfig = serde_json::from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "json") {
            validate_config(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert_eq!(n, 4);
}
