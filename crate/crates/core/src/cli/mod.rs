//! The `stepcast` command line: `synth`, `run`, `predict` and `report`.
//!
//! Each subcommand is a plain function (`cmd_*`) so it can be driven from
//! tests and examples; [`main_with_args`] adds argument parsing, logging and
//! exit codes (0 success, 1 usage or config, 2 data or schema, 3 numerical).

mod checkpoint;
mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::dataset::WindowedExample;
use crate::error::{Error, Result};
use crate::forecasters::{Architecture, Head};
use crate::ingest::{
    build_daily_features, parse_streams, read_daily_features_csv, write_daily_features_csv,
    UserDays,
};
use crate::metrics::{render_reports, run_experiments, RunResults, Stage, StageError};
use crate::synth::{generate_cohort, generate_daily, preset, CohortSpec, CohortSummary};

pub use checkpoint::{seal, sha256_hex, unseal, Checkpoint, CHECKPOINT_SCHEMA_VERSION};
pub use config::{merge_toml, DataSource, ExperimentConfig, Overrides};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const RESULTS_FILE: &str = "results.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORTS_DIR: &str = "reports";
pub const CHECKPOINTS_DIR: &str = "checkpoints";

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Paths written by [`cmd_synth`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthOutput {
    pub activity: PathBuf,
    pub engagement: PathBuf,
    pub ground_truth: PathBuf,
    /// Daily feature rows of every user, the format `predict` reads.
    pub daily: PathBuf,
    pub summary: CohortSummary,
}

/// Write `activity.csv`, `engagement.csv`, `ground_truth.csv` and
/// `daily_features.csv` into `out`.
pub fn cmd_synth(spec: &CohortSpec, out: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    create_dir(out)?;
    let activity = out.join("activity.csv");
    let engagement = out.join("engagement.csv");
    let ground_truth = out.join("ground_truth.csv");
    let open = |p: &Path| {
        File::create(p)
            .map(BufWriter::new)
            .map_err(|e| Error::io(p, e))
    };
    let (mut a, mut e, mut g) = (open(&activity)?, open(&engagement)?, open(&ground_truth)?);
    let summary = generate_cohort(spec, &mut a, &mut e, &mut g)?;
    for (w, p) in [
        (&mut a, &activity),
        (&mut e, &engagement),
        (&mut g, &ground_truth),
    ] {
        w.flush().map_err(|err| Error::io(p, err))?;
    }
    let daily = out.join("daily_features.csv");
    let (raw, _) = generate_daily(spec)?;
    write_daily_features_csv(raw.values().flatten(), open(&daily)?)
        .map_err(|e| Error::io(&daily, e))?;
    info!(
        "wrote {} users, {} activity rows, {} engagement rows to {}",
        summary.users,
        summary.activity_rows,
        summary.engagement_rows,
        out.display()
    );
    Ok(SynthOutput {
        activity,
        engagement,
        ground_truth,
        daily,
        summary,
    })
}

/// Raw (unfiltered) user-days of a data source.
pub fn load_data(data: &DataSource) -> Result<UserDays> {
    match data {
        DataSource::Synthetic { cohort, .. } => Ok(generate_daily(cohort)?.0),
        DataSource::Csv {
            activity,
            engagement,
        } => {
            let (a, e) = parse_streams(activity, engagement)?;
            build_daily_features(&a, &e)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub cells_checked: usize,
    /// Always empty for a completed run; a leak aborts the run instead.
    pub test_users_in_fitting: Vec<String>,
}

/// Seeds, digests and errors of a run. Contains no timestamps, so the same
/// config reproduces it byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub package_version: String,
    pub config: ExperimentConfig,
    pub master_seed: u64,
    pub selected_window: usize,
    pub cell_seeds: BTreeMap<String, u64>,
    /// Path relative to the output directory → SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
    pub stage_errors: Vec<StageError>,
    pub audit: AuditSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub results: RunResults,
    pub manifest: Manifest,
    pub report_files: Vec<PathBuf>,
    pub checkpoint_files: Vec<PathBuf>,
}

fn checkpoint_name(architecture: Architecture, window: usize) -> String {
    format!("{architecture}_w{window}.json")
}

/// Write reports for `results` under `out/reports`; returns paths and
/// digests keyed relative to `out`.
fn write_reports(
    results: &RunResults,
    out: &Path,
) -> Result<(Vec<PathBuf>, BTreeMap<String, String>)> {
    let dir = out.join(REPORTS_DIR);
    create_dir(&dir)?;
    let mut paths = Vec::new();
    let mut digests = BTreeMap::new();
    let dataset = &results.settings.dataset;
    for report in render_reports(results)? {
        for (name, body) in [
            (report.csv_name(dataset), &report.csv),
            (report.text_name(dataset), &report.text),
        ] {
            let path = dir.join(&name);
            write_file(&path, body.as_bytes())?;
            digests.insert(format!("{REPORTS_DIR}/{name}"), sha256_hex(body.as_bytes()));
            paths.push(path);
        }
    }
    Ok((paths, digests))
}

/// Run the configured stages and write results, reports, checkpoints and
/// the manifest under `config.out`.
pub fn cmd_run(config: &ExperimentConfig) -> Result<RunSummary> {
    config.experiment.validate()?;
    let raw = load_data(&config.data)?;
    let output = run_experiments(&raw, &config.experiment, config.jobs)?;
    let results = output.results;
    for e in &results.errors {
        warn!("stage {} error: {}", e.stage, e.message);
    }

    let out = &config.out;
    create_dir(out)?;
    let mut files = BTreeMap::new();
    let results_json = serde_json::to_string_pretty(&results)?;
    write_file(&out.join(RESULTS_FILE), results_json.as_bytes())?;
    files.insert(
        RESULTS_FILE.to_string(),
        sha256_hex(results_json.as_bytes()),
    );

    let (report_files, report_digests) = write_reports(&results, out)?;
    files.extend(report_digests);

    let mut checkpoint_files = Vec::new();
    if !output.models.is_empty() {
        let dir = out.join(CHECKPOINTS_DIR);
        create_dir(&dir)?;
        for model in output.models.into_values() {
            let name = checkpoint_name(model.config.architecture, model.config.window);
            let path = dir.join(&name);
            let text = Checkpoint::new(model).save(&path)?;
            files.insert(
                format!("{CHECKPOINTS_DIR}/{name}"),
                sha256_hex(text.as_bytes()),
            );
            checkpoint_files.push(path);
        }
    }

    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        master_seed: config.experiment.seed,
        selected_window: results.selected_window,
        cell_seeds: results
            .cells
            .iter()
            .map(|(id, c)| (id.clone(), c.seed))
            .collect(),
        files,
        stage_errors: results.errors.clone(),
        audit: AuditSummary {
            cells_checked: results.cells.values().filter(|c| c.audit.is_some()).count(),
            test_users_in_fitting: results
                .audit_violations()
                .into_iter()
                .flat_map(|(_, users)| users.into_iter().map(|u| u.to_string()))
                .collect(),
        },
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)?;
    write_file(&out.join(MANIFEST_FILE), manifest_json.as_bytes())?;
    info!(
        "wrote {} report files and {} checkpoints to {}",
        report_files.len(),
        checkpoint_files.len(),
        out.display()
    );
    Ok(RunSummary {
        results,
        manifest,
        report_files,
        checkpoint_files,
    })
}

/// Re-render the report tables of a finished run from its stored results.
pub fn cmd_report(out: &Path) -> Result<Vec<PathBuf>> {
    let path = out.join(RESULTS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let results: RunResults = serde_json::from_str(&text)?;
    Ok(write_reports(&results, out)?.0)
}

/// A forecast with the metadata of the model that made it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub architecture: Architecture,
    pub window: usize,
    pub head: Head,
    pub outcome: crate::dataset::Outcome,
    pub user_id: String,
    pub target_date: chrono::NaiveDate,
    /// Raw-unit forecast (regression) or goal probability (classification).
    pub value: f64,
}

/// Forecast the day after a window of daily feature rows (one user, exactly
/// the model's `w` rows, in date order).
pub fn cmd_predict(checkpoint: &Path, window_csv: &Path) -> Result<Prediction> {
    let model = Checkpoint::load(checkpoint)?.model;
    let file = File::open(window_csv).map_err(|e| Error::io(window_csv, e))?;
    let mut days = read_daily_features_csv(file, &window_csv.display().to_string())?;
    days.sort_by_key(|d| d.date);
    let w = model.config.window;
    if days.len() != w {
        return Err(Error::WindowMismatch {
            expected: w,
            got: days.len(),
        });
    }
    if days.iter().any(|d| d.user_id != days[0].user_id) {
        return Err(Error::Config(
            "window rows must belong to a single user".into(),
        ));
    }
    let example = WindowedExample::from_days(&days, None, &[])?;
    let value = model.predict(&example)?;
    Ok(Prediction {
        architecture: model.config.architecture,
        window: w,
        head: model.config.head,
        outcome: model.config.outcome,
        user_id: example.user_id.to_string(),
        target_date: example.target_date,
        value,
    })
}

#[derive(Debug, Parser)]
#[command(
    name = "stepcast",
    version,
    about = "Next-day physical-activity forecasting from wearable and app-engagement streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort as minute-level CSV streams.
    Synth(SynthArgs),
    /// Run the experiment stages and write reports, checkpoints and a manifest.
    Run(RunArgs),
    /// Forecast the next day from a checkpoint and a window of daily rows.
    Predict(PredictArgs),
    /// Re-render report tables from a run's stored results.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// TOML file of cohort settings applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "prediabetes")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    coupling: Option<f64>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated subset of: preprocess, sweep, baseline,
    /// classification, cohorts, per_user, outcomes.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<String>>,
    /// Synthetic preset to use instead of the config's data source.
    #[arg(long)]
    preset: Option<String>,
    /// Model cells trained concurrently.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Daily feature CSV holding exactly the model's window of rows.
    #[arg(long)]
    window: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Output directory of a previous `run`.
    #[arg(long)]
    out: PathBuf,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn synth_spec(args: &SynthArgs) -> Result<CohortSpec> {
    let mut spec = preset(&args.preset)?;
    if let Some(path) = &args.config {
        let patch: toml::Table = read_text(path)?
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        spec = merge_toml(&spec, &patch)?;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(n) = args.users {
        spec.n_users = n;
    }
    if let Some(d) = args.days {
        spec.n_days = d;
    }
    if let Some(c) = args.coupling {
        spec.coupling = c;
    }
    spec.validate()?;
    Ok(spec)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => {
            let spec = synth_spec(&args)?;
            let out = cmd_synth(&spec, &args.out)?;
            println!(
                "{} users: {} / {} / {}",
                out.summary.users,
                out.activity.display(),
                out.engagement.display(),
                out.ground_truth.display()
            );
        }
        Command::Run(args) => {
            let text = args.config.as_deref().map(read_text).transpose()?;
            let stages = args
                .stages
                .map(|v| {
                    v.iter()
                        .map(|s| s.trim().parse::<Stage>())
                        .collect::<Result<Vec<_>>>()
                })
                .transpose()?;
            let overrides = Overrides {
                seed: args.seed,
                out: args.out,
                stages,
                preset: args.preset,
                jobs: args.jobs,
            };
            let config = ExperimentConfig::resolve(text.as_deref(), &overrides)?;
            let summary = cmd_run(&config)?;
            for p in &summary.report_files {
                println!("{}", p.display());
            }
            if !summary.results.errors.is_empty() {
                eprintln!(
                    "{} stage errors recorded in {}",
                    summary.results.errors.len(),
                    config.out.join(MANIFEST_FILE).display()
                );
            }
        }
        Command::Predict(args) => {
            let p = cmd_predict(&args.checkpoint, &args.window)?;
            println!("{}", serde_json::to_string(&p)?);
        }
        Command::Report(args) => {
            for p in cmd_report(&args.out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_windows, Outcome};
    use crate::forecasters::{train, ModelConfig};
    use crate::ingest::preprocess;

    #[test]
    fn parse_errors_exit_with_usage_code() {
        assert_eq!(main_with_args(["stepcast", "frobnicate"]), 1);
        assert_eq!(
            main_with_args(["stepcast", "run", "--stages", "bogus", "--seed", "1"]),
            1
        );
        assert_eq!(main_with_args(["stepcast", "--help"]), 0);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let spec = CohortSpec {
            n_users: 6,
            n_days: 40,
            invalid_user_fraction: 0.0,
            ..preset("sleep").unwrap()
        };
        let (raw, _) = generate_daily(&spec).unwrap();
        let (users, _) = preprocess(&raw);
        let examples: Vec<_> = users
            .values()
            .flat_map(|d| build_windows(d, 3, &[Outcome::Steps], false).unwrap())
            .collect();
        let config = ModelConfig {
            architecture: Architecture::LstmLate,
            window: 3,
            hidden: 4,
            late_hidden: 3,
            late_decision: 2,
            max_epochs: 2,
            ..ModelConfig::default()
        };
        let model = train(&config, &examples, &[]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        Checkpoint::new(model.clone()).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap().model;
        assert_eq!(loaded, model);
        let a = model.predict_batch(&examples).unwrap();
        let b = loaded.predict_batch(&examples).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));

        // Predict from a window CSV, then against a mismatched window.
        let (user, days) = users.iter().next().unwrap();
        let csv_path = dir.path().join("window.csv");
        write_daily_features_csv(&days[..3], File::create(&csv_path).unwrap()).unwrap();
        let p = cmd_predict(&path, &csv_path).unwrap();
        let direct = model
            .predict(&WindowedExample::from_days(&days[..3], None, &[]).unwrap())
            .unwrap();
        assert_eq!(p.value.to_bits(), direct.to_bits());
        assert_eq!(p.user_id, user.as_str());
        write_daily_features_csv(&days[..2], File::create(&csv_path).unwrap()).unwrap();
        assert!(matches!(
            cmd_predict(&path, &csv_path),
            Err(Error::WindowMismatch {
                expected: 3,
                got: 2
            })
        ));

        let mut bytes = fs::read(&path).unwrap();
        let i = bytes.len() / 2;
        bytes[i] = if bytes[i] == b'1' { b'2' } else { b'1' };
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::CheckpointIntegrity(_))
        ));
    }
}
