//! The `stepcast` binary end to end: synth → run on the written CSVs →
//! predict → report.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use stepcast::cli::{load_data, sha256_hex, DataSource, Manifest};
use stepcast::synth::{generate_daily, preset, CohortSpec};

fn stepcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stepcast"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

const SMALL_MODEL: &str =
    "[experiment.model]\nhidden = 6\nlate_hidden = 4\nlate_decision = 3\nmax_epochs = 4\n";

#[test]
fn synth_run_predict_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = stepcast(&[
        "synth",
        "--preset",
        "sleep",
        "--seed",
        "4",
        "--users",
        "16",
        "--days",
        "40",
        "--out",
        p(&data),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // The CSVs on disk aggregate to the same user-days as the in-memory generator.
    let spec = CohortSpec {
        seed: 4,
        n_users: 16,
        n_days: 40,
        ..preset("sleep").unwrap()
    };
    let from_csv = load_data(&DataSource::Csv {
        activity: data.join("activity.csv"),
        engagement: data.join("engagement.csv"),
    })
    .unwrap();
    assert_eq!(from_csv, generate_daily(&spec).unwrap().0);

    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        format!(
            "seed = 2\n[data]\nactivity = \"{}\"\nengagement = \"{}\"\n[experiment]\nstages = [\"preprocess\", \"baseline\"]\ngoal_thresholds = [10000]\n{SMALL_MODEL}",
            p(&data.join("activity.csv")),
            p(&data.join("engagement.csv"))
        ),
    )
    .unwrap();
    let run_dir = dir.path().join("run");
    let out = stepcast(&["run", "--config", p(&config), "--out", p(&run_dir)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.master_seed, 2);
    assert!(manifest.audit.test_users_in_fitting.is_empty());
    assert!(
        manifest.stage_errors.is_empty(),
        "{:?}",
        manifest.stage_errors
    );
    for (rel, digest) in &manifest.files {
        assert_eq!(
            &sha256_hex(&fs::read(run_dir.join(rel)).unwrap()),
            digest,
            "{rel}"
        );
    }
    let reports: Vec<_> = manifest
        .files
        .keys()
        .filter(|k| k.starts_with("reports/"))
        .collect();
    assert_eq!(
        reports,
        [
            "reports/baseline_custom.csv",
            "reports/baseline_custom.txt",
            "reports/preprocessing_custom.csv",
            "reports/preprocessing_custom.txt"
        ]
    );
    assert_eq!(
        manifest
            .files
            .keys()
            .filter(|k| k.starts_with("checkpoints/"))
            .count(),
        8
    );

    // A window of the first retained user's last 7 days.
    let daily = fs::read_to_string(data.join("daily_features.csv")).unwrap();
    let mut lines = daily.lines();
    let header = lines.next().unwrap();
    let user_rows: Vec<&str> = lines.filter(|l| l.starts_with("u000,")).collect();
    let window = dir.path().join("window.csv");
    fs::write(
        &window,
        format!(
            "{header}\n{}\n",
            user_rows[user_rows.len() - 7..].join("\n")
        ),
    )
    .unwrap();
    let ckpt = run_dir.join("checkpoints/lstm_late_w7.json");
    let out = stepcast(&["predict", "--checkpoint", p(&ckpt), "--window", p(&window)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let pred: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(pred["architecture"], "lstm_late");
    assert_eq!(pred["window"], 7);
    assert!(pred["value"].as_f64().unwrap().is_finite());

    // Too few rows for the model's window.
    fs::write(
        &window,
        format!("{header}\n{}\n", user_rows[..3].join("\n")),
    )
    .unwrap();
    let out = stepcast(&["predict", "--checkpoint", p(&ckpt), "--window", p(&window)]);
    assert_eq!(out.status.code(), Some(2));

    // `report` re-renders identical bytes.
    let before = fs::read(run_dir.join("reports/baseline_custom.txt")).unwrap();
    fs::remove_dir_all(run_dir.join("reports")).unwrap();
    assert!(stepcast(&["report", "--out", p(&run_dir)]).status.success());
    assert_eq!(
        fs::read(run_dir.join("reports/baseline_custom.txt")).unwrap(),
        before
    );
}

#[test]
fn stages_flag_limits_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        format!("seed = 1\n[data]\npreset = \"sleep\"\n[data.cohort]\nn_users = 14\n[experiment]\nwindows = [3, 7]\n{SMALL_MODEL}"),
    )
    .unwrap();
    let run_dir = dir.path().join("run");
    let out = stepcast(&[
        "run",
        "--config",
        p(&config),
        "--stages",
        "sweep",
        "--out",
        p(&run_dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut names: Vec<String> = fs::read_dir(run_dir.join("reports"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["window_sweep_sleep.csv", "window_sweep_sleep.txt"]);
    let csv = fs::read_to_string(run_dir.join("reports/window_sweep_sleep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    assert!(!run_dir.join("checkpoints").exists());
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    assert_eq!(stepcast(&["run"]).status.code(), Some(1), "missing seed");
    assert_eq!(
        stepcast(&["run", "--seed", "1", "--stages", "nope"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        stepcast(&["run", "--seed", "1", "--preset", "mars"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(stepcast(&["predict"]).status.code(), Some(1));
    assert_eq!(stepcast(&["--version"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    assert_eq!(
        stepcast(&["run", "--config", p(&missing)]).status.code(),
        Some(2)
    );
}
