use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::json;
use tdlab::config::{Experiment, ExperimentConfig};
use tdlab::manifest::{RunManifest, MANIFEST_FILE};
use tdlab::{plot, LabError, RunOptions};

fn small(experiment: &str, dir: &Path) -> ExperimentConfig {
    let parameters = match experiment {
        "kernel-circle" => json!({"n_states": 16, "train_count": 12, "reward_state": 8, "td_steps": 10, "mc_steps": 40, "snapshots": 5}),
        "rank-evolution" => json!({"width": 3, "height": 3, "hidden": [6], "steps": 40, "log_size": 60, "probes": 6}),
        "fourier-trajectory" => json!({"width": 3, "height": 3, "hidden": [6], "steps": 40, "rollout_length": 8}),
        "distill-compare" => json!({
            "width": 3, "height": 3, "hidden": [6], "teacher_steps": 40, "dataset_size": 60,
            "student_steps": 40, "probes": 6, "robustness_samples": 3, "interpolation_pairs": 4,
            "objectives": ["q-regression", "behaviour-cloning", "double-q"]
        }),
        _ => json!({}),
    };
    ExperimentConfig::from_value(&json!({
        "experiment": experiment,
        "parameters": parameters,
        "seeds": [0, 1],
        "output_dir": dir,
    }))
    .unwrap()
}

fn files_under(root: &Path) -> BTreeSet<String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeSet<String>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
            }
        }
    }
    let mut out = BTreeSet::new();
    walk(root, root, &mut out);
    out
}

fn run(config: &ExperimentConfig, jobs: usize) -> PathBuf {
    tdlab::run(config, &RunOptions { jobs: Some(jobs), output_root: None }).unwrap().dir
}

#[test]
fn reruns_write_identical_csvs_regardless_of_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    for experiment in ["kernel-circle", "rank-evolution", "distill-compare"] {
        let a = run(&small(experiment, &tmp.path().join(format!("{experiment}-a"))), 1);
        let b = run(&small(experiment, &tmp.path().join(format!("{experiment}-b"))), 3);
        let files = files_under(&a);
        assert_eq!(files, files_under(&b));
        for f in files.iter().filter(|f| f.ends_with(".csv") || f.ends_with(".jsonl") || f.ends_with(".svg")) {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{experiment}: {f} differs");
        }
    }
}

#[test]
fn manifest_lists_every_file_with_its_digest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run(&small("fourier-trajectory", tmp.path()), 2);
    let manifest = RunManifest::read(&dir.join(MANIFEST_FILE)).unwrap();
    let listed: BTreeSet<String> = manifest.artifacts.iter().map(|e| e.path.clone()).collect();
    let mut on_disk = files_under(&dir);
    on_disk.remove(MANIFEST_FILE);
    assert_eq!(listed, on_disk);
    for e in &manifest.artifacts {
        let bytes = std::fs::read(dir.join(&e.path)).unwrap();
        assert_eq!(bytes.len() as u64, e.bytes);
        let hex: String = <sha2::Sha256 as sha2::Digest>::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(hex, e.sha256, "{}", e.path);
    }
    assert_eq!(manifest.timings.per_seed_seconds.len(), 2);
    assert!(!manifest.checks.is_empty());
}

#[test]
fn rerun_into_same_directory_drops_stale_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = small("fourier-trajectory", tmp.path());
    run(&config, 1);
    config.seeds = vec![5];
    let dir = run(&config, 1);
    assert!(!files_under(&dir).iter().any(|f| f.starts_with("seed-0/")));
    assert!(dir.join("seed-5/trajectory.csv").is_file());
}

#[test]
fn hashed_directory_ignores_output_location_and_key_order() {
    let a = ExperimentConfig::from_json(r#"{"seeds":[1],"experiment":"second-order-scaling","parameters":{"hidden":8,"discount":0.9}}"#).unwrap();
    let b = ExperimentConfig::from_json(r#"{"experiment":"second-order-scaling","parameters":{"discount":0.90,"hidden":8},"seeds":[1]}"#).unwrap();
    assert_eq!(a.hash(), b.hash());
    let root = Path::new("runs");
    assert_eq!(a.resolve_output_dir(Some(root)), b.resolve_output_dir(Some(root)));
    assert!(a.resolve_output_dir(Some(root)).starts_with(root));
}

#[test]
fn every_preset_round_trips_through_json() {
    for e in Experiment::ALL {
        let preset = ExperimentConfig::preset(e);
        let back = ExperimentConfig::from_value(&preset.to_json()).unwrap();
        assert_eq!(back, preset);
        assert_eq!(back.hash(), preset.hash());
    }
}

#[test]
fn missing_csv_is_named_by_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run(&small("fourier-trajectory", tmp.path()), 1);
    let victim = dir.join("seed-1/spectrum.csv");
    std::fs::remove_file(&victim).unwrap();
    match plot::emit_plots(&dir.join(MANIFEST_FILE)) {
        Err(LabError::MissingArtifact(p)) => assert_eq!(p, victim),
        other => panic!("expected a missing artifact error, got {other:?}"),
    }
    assert!(matches!(plot::emit_plots(&tmp.path().join("nowhere.json")), Err(LabError::MissingArtifact(_))));
}

#[test]
fn header_only_csv_plots_as_no_data() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run(&small("fourier-trajectory", tmp.path()), 1);
    std::fs::write(dir.join("seed-0/trajectory.csv"), "t,state_index,predicted,optimal,reward\n").unwrap();
    let written = plot::emit_plots(&dir.join(MANIFEST_FILE)).unwrap();
    assert!(written.contains(&dir.join("seed-0/trajectory.svg")));
    assert!(std::fs::read_to_string(dir.join("seed-0/trajectory.svg")).unwrap().contains("no data"));
    assert!(!std::fs::read_to_string(dir.join("seed-1/trajectory.svg")).unwrap().contains("no data"));
}

fn tdlab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tdlab")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

#[test]
fn invalid_config_fails_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let config = tmp.path().join("bad.json");
    let doc = json!({
        "experiment": "kernel-circle",
        "parameters": {"discounts": [0.5, 1.0], "lengthscales": [], "td_steps": -3, "colour": "red"},
        "seeds": [0],
        "output_dir": out_dir,
        "notes": "x",
    });
    std::fs::write(&config, doc.to_string()).unwrap();
    let out = tdlab(&["run", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    for needle in ["notes", "parameters.lengthscales", "parameters.td_steps", "parameters.colour"] {
        assert!(stderr.contains(needle), "{needle} not reported in {stderr}");
    }
    assert!(!out_dir.exists());

    let good = tmp.path().join("good.json");
    std::fs::write(&good, json!({"experiment": "kernel-circle", "seeds": [0], "output_dir": out_dir}).to_string()).unwrap();
    let out = tdlab(&["run", good.to_str().unwrap(), "--set", "parameters.discounts=[0.5,1.0]"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("discount must be below 1"));
    assert!(!out_dir.exists());
}

#[test]
fn check_flag_sets_exit_status() {
    let tmp = tempfile::tempdir().unwrap();
    let write = |name: &str, config: &ExperimentConfig| {
        let p = tmp.path().join(name);
        std::fs::write(&p, config.to_json().to_string()).unwrap();
        p
    };
    let passing = write("f.json", &small("fourier-trajectory", &tmp.path().join("f")));
    let out = tdlab(&["run", passing.to_str().unwrap(), "--check", "--jobs", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS Parseval"));

    let failing = write("k.json", &small("kernel-circle", &tmp.path().join("k")));
    let out = tdlab(&["run", failing.to_str().unwrap(), "--check", "--seeds", "3"]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL seed 3"), "{stdout}");
    assert!(tmp.path().join("k/seed-3/summary.csv").is_file());
}

#[test]
fn presets_print_loadable_configs() {
    let out = tdlab(&["presets", "rank-evolution"]);
    assert!(out.status.success());
    let config = ExperimentConfig::from_json(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(config, ExperimentConfig::preset(Experiment::RankEvolution));
    let listing = String::from_utf8_lossy(&tdlab(&["presets"]).stdout).to_string();
    assert_eq!(listing.lines().count(), Experiment::ALL.len());
}
