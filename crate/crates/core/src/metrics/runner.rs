//! Staged experiment protocol over one preprocessed cohort.
//!
//! Every trained model is a *cell* identified by (percentile cohort,
//! architecture, window, head, outcome). Cells are computed once, cached and
//! shared between stages, so the percentile-0 multimodal cell of the cohort
//! stage is the very model of the window sweep and the baseline table. Each
//! cell draws its training seed from SHA-256 of the master seed and the cell
//! id; participant splits depend on the master seed only.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{mae, MetricsReport};
use crate::dataset::{
    label_goal, select_engaged_cohort, split_participants, windows_for_users, Outcome,
    SplitAssignment, WindowedExample, WINDOW_SIZES,
};
use crate::error::{Error, Result};
use crate::forecasters::{
    self, evaluate_arima_protocol, Architecture, Head, Modality, ModelConfig, ModelWeights,
    TrainedForecaster,
};
use crate::ingest::{preprocess, PreprocessSummary, UserDays, UserId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Preprocess,
    Sweep,
    Baseline,
    Classification,
    Cohorts,
    PerUser,
    Outcomes,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Preprocess,
        Stage::Sweep,
        Stage::Baseline,
        Stage::Classification,
        Stage::Cohorts,
        Stage::PerUser,
        Stage::Outcomes,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Sweep => "sweep",
            Stage::Baseline => "baseline",
            Stage::Classification => "classification",
            Stage::Cohorts => "cohorts",
            Stage::PerUser => "per_user",
            Stage::Outcomes => "outcomes",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Stage::ALL.iter().map(|st| st.as_str()).collect();
                Error::Config(format!("unknown stage {s:?}; expected one of {names:?}"))
            })
    }
}

/// What to run on a cohort. Model hyperparameters come from `model`; its
/// architecture, window, head, outcome and seed are overwritten per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    /// Name used in report file names.
    pub dataset: String,
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub windows: Vec<usize>,
    /// Window used by later stages when the sweep is not run.
    pub default_window: usize,
    pub architectures: Vec<Architecture>,
    pub goal_thresholds: Vec<u32>,
    pub percentiles: Vec<u32>,
    pub outcomes: Vec<Outcome>,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub require_contiguous_days: bool,
    pub model: ModelConfig,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            dataset: "prediabetes".into(),
            seed: 0,
            stages: Stage::ALL.to_vec(),
            windows: WINDOW_SIZES.to_vec(),
            default_window: 7,
            architectures: Architecture::ALL.to_vec(),
            goal_thresholds: vec![6000, 8000],
            percentiles: vec![0, 25, 50, 75],
            outcomes: vec![Outcome::SedMinutes, Outcome::WearTime, Outcome::LpaMinutes],
            test_fraction: 0.2,
            val_fraction: 0.1,
            require_contiguous_days: false,
            model: ModelConfig::default(),
        }
    }
}

impl ExperimentSettings {
    pub fn validate(&self) -> Result<()> {
        if self.architectures.is_empty() {
            return Err(Error::Config(
                "at least one architecture is required".into(),
            ));
        }
        if self.windows.is_empty() {
            return Err(Error::Config("at least one window size is required".into()));
        }
        for &w in self
            .windows
            .iter()
            .chain(std::iter::once(&self.default_window))
        {
            if !WINDOW_SIZES.contains(&w) {
                return Err(Error::Config(format!(
                    "window {w} is not one of {WINDOW_SIZES:?}"
                )));
            }
        }
        if let Some(p) = self.percentiles.iter().find(|&&p| p >= 100) {
            return Err(Error::Config(format!("percentile {p} must be below 100")));
        }
        if self.dataset.is_empty()
            || !self
                .dataset
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(Error::Config(format!(
                "dataset name {:?} must be non-empty [A-Za-z0-9_-]",
                self.dataset
            )));
        }
        if self.outcomes.contains(&Outcome::Steps) {
            return Err(Error::Config(
                "additional outcomes exclude steps, which every stage already forecasts".into(),
            ));
        }
        let mut probe = self.model.clone();
        probe.window = self.default_window;
        probe.head = Head::Regression;
        probe.outcome = Outcome::Steps;
        for &a in &self.architectures {
            probe.architecture = a;
            probe.validate()?;
        }
        // Split fractions are checked by the split itself; probe them here so
        // bad values fail before any training.
        let probe_users: Vec<UserId> = (0..100).map(|i| UserId::new(i.to_string())).collect();
        split_participants(&probe_users, self.test_fraction, self.val_fraction, 0)?;
        Ok(())
    }

    fn runs(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    fn lstm_architectures(&self) -> Vec<Architecture> {
        self.architectures
            .iter()
            .copied()
            .filter(|a| a.is_lstm())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "threshold", rename_all = "snake_case")]
pub enum HeadKey {
    Regression,
    Goal(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub percentile: u32,
    pub architecture: Architecture,
    pub window: usize,
    pub head: HeadKey,
    pub outcome: Outcome,
}

impl CellKey {
    fn steps(percentile: u32, architecture: Architecture, window: usize) -> Self {
        CellKey {
            percentile,
            architecture,
            window,
            head: HeadKey::Regression,
            outcome: Outcome::Steps,
        }
    }

    /// Stable textual id, also the seed-derivation input.
    pub fn id(&self) -> String {
        let head = match self.head {
            HeadKey::Regression => "regression".to_string(),
            HeadKey::Goal(t) => format!("goal{t}"),
        };
        format!(
            "p{}/{}/w{}/{}/{}",
            self.percentile, self.architecture, self.window, head, self.outcome
        )
    }
}

/// First 8 bytes (little endian) of SHA-256(master seed LE bytes ‖ cell id).
pub fn cell_seed(master: u64, cell_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(cell_id.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Which participants a cell's fitting and evaluation touched, read off the
/// examples actually passed to training and prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub fit_users: BTreeSet<UserId>,
    pub eval_users: BTreeSet<UserId>,
    /// Per-user models (ARIMA) fit each evaluated user on that user's own
    /// earlier days; overlap is by construction, not a leak.
    pub per_user_history: bool,
}

impl AccessRecord {
    pub fn leaked_users(&self) -> Vec<UserId> {
        if self.per_user_history {
            return Vec::new();
        }
        self.fit_users
            .intersection(&self.eval_users)
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Ok {
        report: MetricsReport,
        /// Validation MAE of regression cells with a validation split.
        val_mae: Option<f64>,
    },
    Unavailable {
        reason: String,
    },
    Failed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub key: CellKey,
    pub seed: u64,
    pub status: CellStatus,
    pub audit: Option<AccessRecord>,
}

impl CellRecord {
    pub fn report(&self) -> Option<&MetricsReport> {
        match &self.status {
            CellStatus::Ok { report, .. } => Some(report),
            _ => None,
        }
    }

    pub fn val_mae(&self) -> Option<f64> {
        match &self.status {
            CellStatus::Ok { val_mae, .. } => *val_mae,
            _ => None,
        }
    }

    fn describe_failure(&self) -> Option<String> {
        match &self.status {
            CellStatus::Ok { .. } => None,
            CellStatus::Unavailable { reason } => {
                Some(format!("{}: unavailable: {reason}", self.key.id()))
            }
            CellStatus::Failed { error } => Some(format!("{}: {error}", self.key.id())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub modality: Modality,
    pub window: usize,
    pub cell: String,
    pub m: Option<usize>,
    pub test_mae: Option<f64>,
    pub val_mae: Option<f64>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub architecture: Architecture,
    pub cell: String,
    pub m: Option<usize>,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub nrmse: Option<f64>,
    /// Early-fusion LSTM against this model, `(early − this)/this`.
    pub margin: Option<f64>,
}

/// One comparison of the early-fusion LSTM against a named baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRow {
    pub baseline: String,
    pub architecture: Architecture,
    pub baseline_mae: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub window: usize,
    pub rows: Vec<BaselineRow>,
    pub margins: Vec<MarginRow>,
    /// Test MAE of predicting the training-set mean steps for every example.
    pub train_mean_mae: Option<f64>,
}

impl BaselineResult {
    pub fn mae_of(&self, architecture: Architecture) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.architecture == architecture)
            .and_then(|r| r.mae)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRow {
    pub threshold: u32,
    pub architecture: Architecture,
    pub m: Option<usize>,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    /// Share of test targets strictly over the threshold.
    pub prevalence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub percentile: u32,
    pub modality: Modality,
    pub users: usize,
    pub m: Option<usize>,
    pub mae: Option<f64>,
    pub available: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerUserRow {
    pub user_id: UserId,
    pub m: usize,
    pub early_mae: f64,
    pub late_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub outcome: Outcome,
    pub m: Option<usize>,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub nrmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: Stage,
    pub message: String,
}

/// Raw results of a run; report tables are rendered from this alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub settings: ExperimentSettings,
    pub preprocessing: PreprocessSummary,
    /// Participant split of the full cohort.
    pub split: Option<SplitAssignment>,
    /// Window used after the sweep.
    pub selected_window: usize,
    pub sweep: Vec<SweepCell>,
    pub baseline: Option<BaselineResult>,
    pub classification: Vec<ClassificationRow>,
    pub cohorts: Vec<CohortRow>,
    pub per_user: Vec<PerUserRow>,
    pub outcomes: Vec<OutcomeRow>,
    pub cells: BTreeMap<String, CellRecord>,
    pub errors: Vec<StageError>,
}

impl RunResults {
    /// Cells whose fitting touched a participant they were evaluated on.
    pub fn audit_violations(&self) -> Vec<(String, Vec<UserId>)> {
        self.cells
            .iter()
            .filter_map(|(id, c)| {
                let leaked = c.audit.as_ref()?.leaked_users();
                (!leaked.is_empty()).then(|| (id.clone(), leaked))
            })
            .collect()
    }
}

/// Results plus the fitted baseline models, keyed by cell id.
pub struct RunOutput {
    pub results: RunResults,
    pub models: BTreeMap<String, TrainedForecaster>,
}

/// A percentile cohort's participant split, or why it has none.
type CohortSplit = std::result::Result<(usize, SplitAssignment), String>;

struct Runner<'a> {
    users: &'a UserDays,
    settings: &'a ExperimentSettings,
    cohorts: BTreeMap<u32, CohortSplit>,
    cells: Mutex<BTreeMap<CellKey, CellRecord>>,
    models: Mutex<BTreeMap<CellKey, TrainedForecaster>>,
}

fn example_users(examples: &[WindowedExample]) -> BTreeSet<UserId> {
    examples.iter().map(|e| e.user_id.clone()).collect()
}

impl<'a> Runner<'a> {
    fn new(users: &'a UserDays, settings: &'a ExperimentSettings) -> Self {
        let mut percentiles: BTreeSet<u32> = settings.percentiles.iter().copied().collect();
        percentiles.insert(0);
        let cohorts = percentiles
            .into_iter()
            .map(|p| {
                let members = select_engaged_cohort(users, f64::from(p));
                let split = split_participants(
                    &members,
                    settings.test_fraction,
                    settings.val_fraction,
                    settings.seed,
                )
                .map(|s| (members.len(), s))
                .map_err(|e| format!("cohort of {} users: {e}", members.len()));
                (p, split)
            })
            .collect();
        Runner {
            users,
            settings,
            cohorts,
            cells: Mutex::new(BTreeMap::new()),
            models: Mutex::new(BTreeMap::new()),
        }
    }

    fn cohort_size(&self, percentile: u32) -> usize {
        match &self.cohorts[&percentile] {
            Ok((n, _)) => *n,
            Err(_) => select_engaged_cohort(self.users, f64::from(percentile)).len(),
        }
    }

    /// Compute every missing cell, in parallel, and return all requested.
    fn ensure(&self, keys: &[CellKey]) -> Vec<CellRecord> {
        let missing: Vec<CellKey> = {
            let done = self.cells.lock().expect("cell cache poisoned");
            let mut seen = BTreeSet::new();
            keys.iter()
                .filter(|k| !done.contains_key(k) && seen.insert(**k))
                .copied()
                .collect()
        };
        let computed: Vec<(CellRecord, Option<TrainedForecaster>)> =
            missing.par_iter().map(|k| self.compute(k)).collect();
        let mut done = self.cells.lock().expect("cell cache poisoned");
        let mut models = self.models.lock().expect("model cache poisoned");
        for (record, model) in computed {
            if let Some(m) = model {
                models.insert(record.key, m);
            }
            done.insert(record.key, record);
        }
        keys.iter().map(|k| done[k].clone()).collect()
    }

    fn compute(&self, key: &CellKey) -> (CellRecord, Option<TrainedForecaster>) {
        let id = key.id();
        let seed = cell_seed(self.settings.seed, &id);
        let (status, audit, model) = match &self.cohorts[&key.percentile] {
            Err(reason) => (
                CellStatus::Unavailable {
                    reason: reason.clone(),
                },
                None,
                None,
            ),
            Ok((_, split)) => match self.fit_and_evaluate(key, seed, split) {
                Ok((report, val_mae, audit, model)) => {
                    info!(
                        "cell {id}: m = {}, test mae = {:.3}, val mae = {}",
                        report.m,
                        report.mae,
                        val_mae.map_or("n/a".to_string(), |v| format!("{v:.3}"))
                    );
                    (CellStatus::Ok { report, val_mae }, Some(audit), Some(model))
                }
                Err(e) => {
                    warn!("cell {id} failed: {e}");
                    (
                        CellStatus::Failed {
                            error: e.to_string(),
                        },
                        None,
                        None,
                    )
                }
            },
        };
        (
            CellRecord {
                key: *key,
                seed,
                status,
                audit,
            },
            model,
        )
    }

    fn windows(&self, users: &BTreeSet<UserId>, key: &CellKey) -> Result<Vec<WindowedExample>> {
        let mut outcomes = vec![Outcome::Steps];
        if key.outcome != Outcome::Steps {
            outcomes.push(key.outcome);
        }
        windows_for_users(
            self.users,
            users,
            key.window,
            &outcomes,
            self.settings.require_contiguous_days,
        )
    }

    fn fit_and_evaluate(
        &self,
        key: &CellKey,
        seed: u64,
        split: &SplitAssignment,
    ) -> Result<(MetricsReport, Option<f64>, AccessRecord, TrainedForecaster)> {
        let mut config = self.settings.model.clone();
        config.architecture = key.architecture;
        config.window = key.window;
        config.outcome = key.outcome;
        config.seed = seed;
        config.head = match key.head {
            HeadKey::Regression => Head::Regression,
            HeadKey::Goal(t) => Head::Classification {
                threshold: f64::from(t),
            },
        };
        config.validate()?;
        if key.architecture == Architecture::Arima {
            return self.arima_cell(key, config, split);
        }

        let train = self.windows(&split.train_users, key)?;
        let val = self.windows(&split.val_users, key)?;
        let test = self.windows(&split.test_users, key)?;
        if test.is_empty() {
            return Err(Error::EmptyInput("test windows"));
        }
        let model = forecasters::train(&config, &train, &val)?;
        let audit = AccessRecord {
            fit_users: example_users(&train)
                .union(&example_users(&val))
                .cloned()
                .collect(),
            eval_users: example_users(&test),
            per_user_history: false,
        };
        let predictions = model.predict_batch(&test)?;
        let users: Vec<UserId> = test.iter().map(|e| e.user_id.clone()).collect();
        let experiment = key.id();
        let (report, val_mae) = match key.head {
            HeadKey::Regression => {
                let actuals = test
                    .iter()
                    .map(|e| e.target(key.outcome))
                    .collect::<Result<Vec<_>>>()?;
                let report =
                    MetricsReport::regression(experiment, &config, &users, &predictions, &actuals)?;
                let val_mae = if val.is_empty() {
                    None
                } else {
                    let vp = model.predict_batch(&val)?;
                    let va = val
                        .iter()
                        .map(|e| e.target(key.outcome))
                        .collect::<Result<Vec<_>>>()?;
                    Some(mae(&vp, &va)?)
                };
                (report, val_mae)
            }
            HeadKey::Goal(t) => {
                let labels = test
                    .iter()
                    .map(|e| label_goal(e, f64::from(t)))
                    .collect::<Result<Vec<_>>>()?;
                let report = MetricsReport::classification(
                    experiment,
                    &config,
                    &users,
                    &predictions,
                    &labels,
                )?;
                (report, None)
            }
        };
        Ok((report, val_mae, audit, model))
    }

    /// Per-user ARIMA on each test participant's steps series.
    fn arima_cell(
        &self,
        key: &CellKey,
        config: ModelConfig,
        split: &SplitAssignment,
    ) -> Result<(MetricsReport, Option<f64>, AccessRecord, TrainedForecaster)> {
        if key.head != HeadKey::Regression || key.outcome != Outcome::Steps {
            return Err(Error::Config("ARIMA forecasts steps only".into()));
        }
        let series: BTreeMap<UserId, Vec<f64>> = split
            .test_users
            .iter()
            .filter_map(|u| {
                let days = self.users.get(u)?;
                Some((u.clone(), days.iter().map(|d| d.total_steps()).collect()))
            })
            .collect();
        let order = (!config.arima_auto).then_some(config.arima_order);
        let evaluation = evaluate_arima_protocol(&series, order)?;
        let mut users = Vec::new();
        let mut predictions = Vec::new();
        let mut actuals = Vec::new();
        for (u, f) in &evaluation.per_user {
            for (p, a) in f.predictions.iter().zip(&f.actuals) {
                users.push(u.clone());
                predictions.push(p.max(0.0));
                actuals.push(*a);
            }
        }
        if predictions.is_empty() {
            return Err(Error::EmptyInput(
                "ARIMA forecasts (every test user excluded)",
            ));
        }
        let report = MetricsReport::regression(key.id(), &config, &users, &predictions, &actuals)?;
        let evaluated: BTreeSet<UserId> = evaluation.per_user.keys().cloned().collect();
        let fits = evaluation
            .per_user
            .into_iter()
            .map(|(u, f)| (u, f.fit))
            .collect();
        let model = TrainedForecaster {
            config,
            normalization: None,
            weights: ModelWeights::Arima { fits },
            training_log: Vec::new(),
        };
        let audit = AccessRecord {
            fit_users: evaluated.clone(),
            eval_users: evaluated,
            per_user_history: true,
        };
        Ok((report, None, audit, model))
    }

    fn train_mean_mae(&self, window: usize) -> Result<f64> {
        let (_, split) = self.cohorts[&0]
            .as_ref()
            .map_err(|e| Error::Split(e.clone()))?;
        let key = CellKey::steps(0, Architecture::LstmEarly, window);
        let train = self.windows(&split.train_users, &key)?;
        let test = self.windows(&split.test_users, &key)?;
        if train.is_empty() || test.is_empty() {
            return Err(Error::EmptyInput("train or test windows"));
        }
        let steps = |set: &[WindowedExample]| -> Result<Vec<f64>> {
            set.iter().map(|e| e.target(Outcome::Steps)).collect()
        };
        let train_y = steps(&train)?;
        let mean = train_y.iter().sum::<f64>() / train_y.len() as f64;
        let test_y = steps(&test)?;
        mae(&vec![mean; test_y.len()], &test_y)
    }
}

fn record_failures(errors: &mut Vec<StageError>, stage: Stage, records: &[CellRecord]) {
    for r in records {
        if let Some(message) = r.describe_failure() {
            errors.push(StageError { stage, message });
        }
    }
}

/// Run the selected stages on a raw (unfiltered) cohort.
///
/// Stage order is fixed: preprocessing, window sweep, baselines, goal
/// classification, engagement cohorts, per-user comparison, additional
/// outcomes. A failing cell is recorded in `errors` and later stages still
/// run. `jobs` bounds the number of cells trained concurrently.
pub fn run_experiments(
    raw: &UserDays,
    settings: &ExperimentSettings,
    jobs: usize,
) -> Result<RunOutput> {
    settings.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_stages(raw, settings))
}

fn run_stages(raw: &UserDays, settings: &ExperimentSettings) -> Result<RunOutput> {
    let (users, preprocessing) = preprocess(raw);
    info!(
        "preprocessing kept {} of {} users, {} valid days",
        preprocessing.users_after, preprocessing.users_before, preprocessing.valid_days
    );
    let runner = Runner::new(&users, settings);
    let mut errors = Vec::new();
    let split = match &runner.cohorts[&0] {
        Ok((_, s)) => Some(s.clone()),
        Err(e) => {
            errors.push(StageError {
                stage: Stage::Preprocess,
                message: e.clone(),
            });
            None
        }
    };

    let mut selected_window = settings.default_window;
    let mut sweep = Vec::new();
    if settings.runs(Stage::Sweep) {
        let keys: Vec<CellKey> = Modality::ALL
            .iter()
            .flat_map(|&m| {
                settings
                    .windows
                    .iter()
                    .map(move |&w| CellKey::steps(0, Architecture::lstm_for(m), w))
            })
            .collect();
        let records = runner.ensure(&keys);
        record_failures(&mut errors, Stage::Sweep, &records);
        sweep = records
            .iter()
            .map(|r| SweepCell {
                modality: r.key.architecture.modality(),
                window: r.key.window,
                cell: r.key.id(),
                m: r.report().map(|x| x.m),
                test_mae: r.report().map(|x| x.mae),
                val_mae: r.val_mae(),
                selected: false,
            })
            .collect();
        // Overall minimum test MAE; ties go to the earlier cell.
        let best = sweep
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.test_mae.map(|m| (i, m)))
            .fold(None, |acc: Option<(usize, f64)>, (i, m)| match acc {
                Some((_, bm)) if bm <= m => acc,
                _ => Some((i, m)),
            });
        match best {
            Some((i, _)) => {
                sweep[i].selected = true;
                selected_window = sweep[i].window;
                info!("window sweep selected w = {selected_window}");
            }
            None => errors.push(StageError {
                stage: Stage::Sweep,
                message: format!("no sweep cell succeeded; using w = {selected_window}"),
            }),
        }
    }
    let w = selected_window;

    let mut baseline = None;
    if settings.runs(Stage::Baseline) {
        let keys: Vec<CellKey> = settings
            .architectures
            .iter()
            .map(|&a| CellKey::steps(0, a, w))
            .collect();
        let records = runner.ensure(&keys);
        record_failures(&mut errors, Stage::Baseline, &records);
        let early = runner
            .ensure(&[CellKey::steps(0, Architecture::LstmEarly, w)])
            .pop()
            .and_then(|r| r.report().map(|x| x.mae));
        let rows: Vec<BaselineRow> = records
            .iter()
            .map(|r| {
                let rep = r.report();
                BaselineRow {
                    architecture: r.key.architecture,
                    cell: r.key.id(),
                    m: rep.map(|x| x.m),
                    mae: rep.map(|x| x.mae),
                    rmse: rep.map(|x| x.rmse),
                    nrmse: rep.and_then(|x| x.nrmse),
                    margin: match (early, rep) {
                        (Some(e), Some(x)) => super::relative_margin(e, x.mae).ok(),
                        _ => None,
                    },
                }
            })
            .collect();
        let margins = match early {
            Some(e) => comparison_margins(e, &rows),
            None => Vec::new(),
        };
        let train_mean_mae = match runner.train_mean_mae(w) {
            Ok(v) => Some(v),
            Err(e) => {
                errors.push(StageError {
                    stage: Stage::Baseline,
                    message: format!("training-mean baseline: {e}"),
                });
                None
            }
        };
        baseline = Some(BaselineResult {
            window: w,
            rows,
            margins,
            train_mean_mae,
        });
    }

    let mut classification = Vec::new();
    if settings.runs(Stage::Classification) {
        let keys: Vec<CellKey> = settings
            .goal_thresholds
            .iter()
            .flat_map(|&t| {
                settings
                    .lstm_architectures()
                    .into_iter()
                    .map(move |a| CellKey {
                        percentile: 0,
                        architecture: a,
                        window: w,
                        head: HeadKey::Goal(t),
                        outcome: Outcome::Steps,
                    })
            })
            .collect();
        let records = runner.ensure(&keys);
        record_failures(&mut errors, Stage::Classification, &records);
        classification = records
            .iter()
            .map(|r| {
                let rep = r.report();
                let HeadKey::Goal(threshold) = r.key.head else {
                    unreachable!("classification cells have a goal head")
                };
                ClassificationRow {
                    threshold,
                    architecture: r.key.architecture,
                    m: rep.map(|x| x.m),
                    accuracy: rep.and_then(|x| x.accuracy),
                    f1: rep.and_then(|x| x.f1),
                    // Filled below from the test windows.
                    prevalence: None,
                }
            })
            .collect();
        if let Some(split) = &split {
            for row in &mut classification {
                row.prevalence = goal_prevalence(&users, split, w, row.threshold, settings).ok();
            }
        }
    }

    let mut cohorts = Vec::new();
    if settings.runs(Stage::Cohorts) {
        let keys: Vec<CellKey> = settings
            .percentiles
            .iter()
            .flat_map(|&p| {
                Modality::ALL
                    .iter()
                    .map(move |&m| CellKey::steps(p, Architecture::lstm_for(m), w))
            })
            .collect();
        let records = runner.ensure(&keys);
        record_failures(&mut errors, Stage::Cohorts, &records);
        cohorts = records
            .iter()
            .map(|r| CohortRow {
                percentile: r.key.percentile,
                modality: r.key.architecture.modality(),
                users: runner.cohort_size(r.key.percentile),
                m: r.report().map(|x| x.m),
                mae: r.report().map(|x| x.mae),
                available: !matches!(r.status, CellStatus::Unavailable { .. }),
            })
            .collect();
    }

    let mut per_user = Vec::new();
    if settings.runs(Stage::PerUser) {
        let records = runner.ensure(&[
            CellKey::steps(0, Architecture::LstmEarly, w),
            CellKey::steps(0, Architecture::LstmLate, w),
        ]);
        record_failures(&mut errors, Stage::PerUser, &records);
        if let (Some(early), Some(late)) = (records[0].report(), records[1].report()) {
            per_user = early
                .per_user
                .iter()
                .filter_map(|(u, e)| {
                    let l = late.per_user.get(u)?;
                    Some(PerUserRow {
                        user_id: u.clone(),
                        m: e.m,
                        early_mae: e.mae,
                        late_mae: l.mae,
                    })
                })
                .collect();
        }
    }

    let mut outcomes = Vec::new();
    if settings.runs(Stage::Outcomes) {
        let keys: Vec<CellKey> = settings
            .outcomes
            .iter()
            .map(|&o| CellKey {
                outcome: o,
                ..CellKey::steps(0, Architecture::LstmEarly, w)
            })
            .collect();
        let records = runner.ensure(&keys);
        record_failures(&mut errors, Stage::Outcomes, &records);
        outcomes = records
            .iter()
            .map(|r| OutcomeRow {
                outcome: r.key.outcome,
                m: r.report().map(|x| x.m),
                mae: r.report().map(|x| x.mae),
                rmse: r.report().map(|x| x.rmse),
                nrmse: r.report().and_then(|x| x.nrmse),
            })
            .collect();
    }

    let cells: BTreeMap<String, CellRecord> = runner
        .cells
        .into_inner()
        .expect("cell cache poisoned")
        .into_values()
        .map(|r| (r.key.id(), r))
        .collect();
    let baseline_keys: BTreeSet<CellKey> = if settings.runs(Stage::Baseline) {
        settings
            .architectures
            .iter()
            .map(|&a| CellKey::steps(0, a, w))
            .collect()
    } else {
        BTreeSet::new()
    };
    let models = runner
        .models
        .into_inner()
        .expect("model cache poisoned")
        .into_iter()
        .filter(|(k, _)| baseline_keys.contains(k))
        .map(|(k, m)| (k.id(), m))
        .collect();
    let results = RunResults {
        settings: settings.clone(),
        preprocessing,
        split,
        selected_window,
        sweep,
        baseline,
        classification,
        cohorts,
        per_user,
        outcomes,
        cells,
        errors,
    };
    let leaks = results.audit_violations();
    if !leaks.is_empty() {
        return Err(Error::State(format!(
            "test participants reached model fitting: {leaks:?}"
        )));
    }
    Ok(RunOutput { results, models })
}

/// The early-fusion LSTM against the better unimodal LSTM, the best linear
/// regression, ARIMA and the late-fusion LSTM, where each was run.
fn comparison_margins(early: f64, rows: &[BaselineRow]) -> Vec<MarginRow> {
    let best_of = |archs: &[Architecture]| -> Option<(Architecture, f64)> {
        rows.iter()
            .filter(|r| archs.contains(&r.architecture))
            .filter_map(|r| r.mae.map(|m| (r.architecture, m)))
            .fold(None, |acc, (a, m)| match acc {
                Some((_, bm)) if bm <= m => acc,
                _ => Some((a, m)),
            })
    };
    let groups: [(&str, &[Architecture]); 4] = [
        (
            "unimodal_lstm",
            &[Architecture::LstmEngagement, Architecture::LstmActivity],
        ),
        (
            "linreg",
            &[
                Architecture::LinregMultimodal,
                Architecture::LinregEngagement,
                Architecture::LinregActivity,
            ],
        ),
        ("arima", &[Architecture::Arima]),
        ("lstm_late", &[Architecture::LstmLate]),
    ];
    groups
        .iter()
        .filter_map(|(name, archs)| {
            let (architecture, baseline_mae) = best_of(archs)?;
            Some(MarginRow {
                baseline: name.to_string(),
                architecture,
                baseline_mae,
                margin: super::relative_margin(early, baseline_mae).ok()?,
            })
        })
        .collect()
}

fn goal_prevalence(
    users: &UserDays,
    split: &SplitAssignment,
    w: usize,
    threshold: u32,
    settings: &ExperimentSettings,
) -> Result<f64> {
    let test = windows_for_users(
        users,
        &split.test_users,
        w,
        &[Outcome::Steps],
        settings.require_contiguous_days,
    )?;
    if test.is_empty() {
        return Err(Error::EmptyInput("test windows"));
    }
    let hits = test
        .iter()
        .map(|e| label_goal(e, f64::from(threshold)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|&b| b)
        .count();
    Ok(hits as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_seed_is_stable_and_distinct() {
        let a = CellKey::steps(0, Architecture::LstmEarly, 7).id();
        let b = CellKey::steps(25, Architecture::LstmEarly, 7).id();
        assert_eq!(a, "p0/lstm_early/w7/regression/steps");
        assert_eq!(cell_seed(3, &a), cell_seed(3, &a));
        assert_ne!(cell_seed(3, &a), cell_seed(3, &b));
        assert_ne!(cell_seed(3, &a), cell_seed(4, &a));
        // Independent recomputation of the derivation.
        let digest = Sha256::new()
            .chain_update(3u64.to_le_bytes())
            .chain_update(a.as_bytes())
            .finalize();
        assert_eq!(
            cell_seed(3, &a),
            u64::from_le_bytes(digest[..8].try_into().unwrap())
        );
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
        assert!("bogus".parse::<Stage>().is_err());
    }

    #[test]
    fn settings_validation() {
        assert!(ExperimentSettings::default().validate().is_ok());
        let bad = [
            ExperimentSettings {
                architectures: vec![],
                ..Default::default()
            },
            ExperimentSettings {
                windows: vec![],
                ..Default::default()
            },
            ExperimentSettings {
                windows: vec![5],
                ..Default::default()
            },
            ExperimentSettings {
                percentiles: vec![100],
                ..Default::default()
            },
            ExperimentSettings {
                dataset: "a/b".into(),
                ..Default::default()
            },
            ExperimentSettings {
                test_fraction: 0.0,
                ..Default::default()
            },
            ExperimentSettings {
                outcomes: vec![Outcome::Steps],
                ..Default::default()
            },
        ];
        for s in bad {
            assert!(matches!(s.validate(), Err(Error::Config(_))), "{s:?}");
        }
    }

    #[test]
    fn audit_flags_overlap_except_per_user_history() {
        let u: BTreeSet<UserId> = ["a", "b"].map(UserId::from).into_iter().collect();
        let v: BTreeSet<UserId> = ["b", "c"].map(UserId::from).into_iter().collect();
        let mut r = AccessRecord {
            fit_users: u,
            eval_users: v,
            per_user_history: false,
        };
        assert_eq!(r.leaked_users(), vec![UserId::from("b")]);
        r.per_user_history = true;
        assert!(r.leaked_users().is_empty());
    }

    #[test]
    fn comparison_margins_pick_best_in_group() {
        let row = |a, mae| BaselineRow {
            architecture: a,
            cell: String::new(),
            m: Some(1),
            mae: Some(mae),
            rmse: None,
            nrmse: None,
            margin: None,
        };
        let rows = vec![
            row(Architecture::LstmEarly, 1989.0),
            row(Architecture::LstmEngagement, 3470.0),
            row(Architecture::LstmActivity, 2051.0),
            row(Architecture::LinregMultimodal, 2985.0),
            row(Architecture::LinregEngagement, 5390.0),
            row(Architecture::LinregActivity, 2978.0),
            row(Architecture::Arima, 3137.0),
            row(Architecture::LstmLate, 2813.0),
        ];
        let m = comparison_margins(1989.0, &rows);
        let pct: Vec<String> = m
            .iter()
            .map(|r| super::super::format_margin(r.margin))
            .collect();
        assert_eq!(pct, ["-3%", "-33%", "-37%", "-29%"]);
        assert_eq!(m[1].architecture, Architecture::LinregActivity);
    }
}
