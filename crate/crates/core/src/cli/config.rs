//! Experiment configuration: one TOML file, every flag overrides its key.
//!
//! ```toml
//! seed = 7
//! out = "runs/prediabetes"
//! jobs = 2
//!
//! [data]
//! preset = "prediabetes"        # or: activity = "a.csv", engagement = "e.csv"
//!
//! [data.cohort]                 # optional overrides of the preset
//! n_users = 30
//!
//! [experiment]
//! stages = ["preprocess", "sweep", "baseline"]
//!
//! [experiment.model]
//! hidden = 32
//! ```

use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::metrics::{ExperimentSettings, Stage};
use crate::synth::{preset, CohortSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        preset: String,
        cohort: CohortSpec,
    },
    Csv {
        activity: PathBuf,
        engagement: PathBuf,
    },
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub out: PathBuf,
    pub jobs: usize,
    /// Carries the master seed.
    pub experiment: ExperimentSettings,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub stages: Option<Vec<Stage>>,
    pub preset: Option<String>,
    pub jobs: Option<usize>,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Recursively overlay `patch` onto `base`.
fn deep_merge(base: &mut Table, patch: &Table) {
    for (k, v) in patch {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(p)) => deep_merge(b, p),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// `base` with the keys of `patch` replaced; unknown keys fail where the
/// target type denies them.
pub fn merge_toml<T: Serialize + DeserializeOwned>(base: &T, patch: &Table) -> Result<T> {
    let mut table = Table::try_from(base).map_err(config_err)?;
    deep_merge(&mut table, patch);
    table.try_into().map_err(config_err)
}

fn take_table(table: &Table, key: &str) -> Result<Table> {
    match table.get(key) {
        None => Ok(Table::new()),
        Some(Value::Table(t)) => Ok(t.clone()),
        Some(_) => Err(Error::Config(format!("`{key}` must be a table"))),
    }
}

fn take_str(table: &Table, key: &str) -> Result<Option<String>> {
    match table.get(key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(Error::Config(format!("`{key}` must be a string"))),
    }
}

fn take_uint(table: &Table, key: &str) -> Result<Option<u64>> {
    match table.get(key) {
        None => Ok(None),
        Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
        Some(_) => Err(Error::Config(format!(
            "`{key}` must be a non-negative integer"
        ))),
    }
}

impl ExperimentConfig {
    /// Resolve a config from optional TOML text plus flag overrides.
    pub fn resolve(toml_text: Option<&str>, overrides: &Overrides) -> Result<Self> {
        let file: Table = match toml_text {
            Some(text) => text.parse().map_err(config_err)?,
            None => Table::new(),
        };
        const TOP_KEYS: [&str; 5] = ["seed", "out", "jobs", "data", "experiment"];
        if let Some(k) = file.keys().find(|k| !TOP_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!(
                "unknown top-level key `{k}` (expected one of {TOP_KEYS:?})"
            )));
        }
        let seed = match overrides.seed {
            Some(s) => s,
            None => take_uint(&file, "seed")?.ok_or_else(|| {
                Error::Config("a master seed is required (`seed` in the config or --seed)".into())
            })?,
        };

        let data_table = take_table(&file, "data")?;
        let file_preset = take_str(&data_table, "preset")?;
        let activity = take_str(&data_table, "activity")?;
        let engagement = take_str(&data_table, "engagement")?;
        let cohort_patch = take_table(&data_table, "cohort")?;
        const DATA_KEYS: [&str; 4] = ["preset", "activity", "engagement", "cohort"];
        if let Some(k) = data_table.keys().find(|k| !DATA_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key `data.{k}`")));
        }
        let data = match (&overrides.preset, file_preset, activity, engagement) {
            (Some(p), ..) => Self::synthetic(p, &cohort_patch, seed)?,
            (None, Some(p), None, None) => Self::synthetic(&p, &cohort_patch, seed)?,
            (None, None, Some(a), Some(e)) => DataSource::Csv {
                activity: a.into(),
                engagement: e.into(),
            },
            (None, None, None, None) => Self::synthetic("prediabetes", &cohort_patch, seed)?,
            _ => {
                return Err(Error::Config(
                    "data needs either `preset` or both `activity` and `engagement`".into(),
                ))
            }
        };

        let mut base = ExperimentSettings::default();
        match &data {
            DataSource::Synthetic { preset, .. } => {
                base.dataset = preset.clone();
                if preset == "sleep" {
                    base.goal_thresholds = vec![10000];
                }
            }
            DataSource::Csv { .. } => base.dataset = "custom".into(),
        }
        let mut experiment = merge_toml(&base, &take_table(&file, "experiment")?)?;
        experiment.seed = seed;
        if let Some(stages) = &overrides.stages {
            experiment.stages = stages.clone();
        }
        experiment.validate()?;

        let out = match (&overrides.out, take_str(&file, "out")?) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => o.into(),
            (None, None) => format!("runs/{}-seed{seed}", experiment.dataset).into(),
        };
        let jobs = match overrides.jobs {
            Some(j) => j,
            None => take_uint(&file, "jobs")?.unwrap_or(1) as usize,
        };
        if jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(ExperimentConfig {
            data,
            out,
            jobs,
            experiment,
        })
    }

    /// Preset spec with `patch` applied; the cohort seed follows the master
    /// seed unless the patch sets it.
    fn synthetic(name: &str, patch: &Table, seed: u64) -> Result<DataSource> {
        let mut spec = preset(name)?;
        spec.seed = seed;
        let cohort = merge_toml(&spec, patch)?;
        cohort.validate()?;
        Ok(DataSource::Synthetic {
            preset: name.to_string(),
            cohort,
        })
    }
}
