//! Evaluation metrics, the experiment runner and report tables.
//!
//! Metric functions are pure and checked against brute-force recomputation.
//! [`run_experiments`] drives the staged protocol (window sweep, baselines,
//! goal classification, engagement cohorts, per-user comparison, additional
//! outcomes) and [`render_reports`] turns its raw results into CSV and
//! plain-text tables.

mod report;
mod runner;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecasters::ModelConfig;
use crate::ingest::UserId;

pub use report::{render_reports, ReportFile, Table};
pub use runner::{
    cell_seed, run_experiments, AccessRecord, BaselineResult, BaselineRow, CellKey, CellRecord,
    CellStatus, ClassificationRow, CohortRow, ExperimentSettings, HeadKey, MarginRow, OutcomeRow,
    PerUserRow, RunOutput, RunResults, Stage, StageError, SweepCell,
};

fn check_lengths(predictions: &[f64], actuals: &[f64], what: &'static str) -> Result<()> {
    if predictions.len() != actuals.len() {
        return Err(Error::Shape {
            op: "metric",
            expected: format!("{} predictions", actuals.len()),
            got: predictions.len().to_string(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput(what));
    }
    Ok(())
}

/// Mean absolute error `(1/m)·Σ|y − ŷ|`.
pub fn mae(predictions: &[f64], actuals: &[f64]) -> Result<f64> {
    check_lengths(predictions, actuals, "mae")?;
    let total: f64 = predictions
        .iter()
        .zip(actuals)
        .map(|(p, a)| (a - p).abs())
        .sum();
    Ok(total / predictions.len() as f64)
}

pub fn mse(predictions: &[f64], actuals: &[f64]) -> Result<f64> {
    check_lengths(predictions, actuals, "mse")?;
    let total: f64 = predictions
        .iter()
        .zip(actuals)
        .map(|(p, a)| (a - p) * (a - p))
        .sum();
    Ok(total / predictions.len() as f64)
}

pub fn rmse(predictions: &[f64], actuals: &[f64]) -> Result<f64> {
    mse(predictions, actuals).map(f64::sqrt)
}

/// RMSE divided by the mean of the actuals; undefined unless that mean is
/// positive.
pub fn nrmse(predictions: &[f64], actuals: &[f64]) -> Result<f64> {
    let r = rmse(predictions, actuals)?;
    let mean = actuals.iter().sum::<f64>() / actuals.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::UndefinedMetric(format!(
            "nrmse needs a positive mean actual, got {mean}"
        )));
    }
    Ok(r / mean)
}

/// Binary confusion counts with `true` as the positive (goal met) class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_labels(predicted: &[bool], actual: &[bool]) -> Result<Self> {
        if predicted.len() != actual.len() {
            return Err(Error::Shape {
                op: "confusion",
                expected: format!("{} labels", actual.len()),
                got: predicted.len().to_string(),
            });
        }
        if predicted.is_empty() {
            return Err(Error::EmptyInput("labels"));
        }
        let mut c = Confusion::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p, a) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// `2PR/(P+R)`; 0 when precision and recall are both 0 or undefined.
    pub fn f1(&self) -> f64 {
        let precision = if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        };
        let recall = if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        };
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }
}

/// `(accuracy, f1)` over the positive class.
pub fn accuracy_f1(predicted: &[bool], actual: &[bool]) -> Result<(f64, f64)> {
    let c = Confusion::from_labels(predicted, actual)?;
    Ok((c.accuracy(), c.f1()))
}

/// Signed relative difference `(model − baseline)/baseline`: negative means
/// the model's error is lower.
pub fn relative_margin(model: f64, baseline: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::UndefinedMetric(format!(
            "margin against a non-positive baseline {baseline}"
        )));
    }
    Ok((model - baseline) / baseline)
}

/// Whole percent with an explicit sign, `0%` at zero.
pub fn format_margin(margin: f64) -> String {
    let pct = (margin * 100.0).round();
    if pct == 0.0 {
        "0%".to_string()
    } else {
        format!("{pct:+}%")
    }
}

/// Examples and MAE of one user inside a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub m: usize,
    pub mae: f64,
}

/// All metrics of one evaluated model.
///
/// For classification runs `mae`/`rmse` are computed on goal probabilities
/// against 0/1 labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment: String,
    pub config: ModelConfig,
    /// Test examples; equals the sum of the per-user counts.
    pub m: usize,
    pub mae: f64,
    pub rmse: f64,
    /// `None` when the mean actual is not positive.
    pub nrmse: Option<f64>,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub per_user: BTreeMap<UserId, UserMetrics>,
    /// Signed margins of this model against named baselines.
    pub margins: BTreeMap<String, f64>,
}

impl MetricsReport {
    /// Regression report over examples tagged by user.
    pub fn regression(
        experiment: impl Into<String>,
        config: &ModelConfig,
        users: &[UserId],
        predictions: &[f64],
        actuals: &[f64],
    ) -> Result<Self> {
        check_lengths(predictions, actuals, "report")?;
        if users.len() != predictions.len() {
            return Err(Error::Shape {
                op: "report",
                expected: format!("{} user tags", predictions.len()),
                got: users.len().to_string(),
            });
        }
        let nrmse = match nrmse(predictions, actuals) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(MetricsReport {
            experiment: experiment.into(),
            config: config.clone(),
            m: predictions.len(),
            mae: mae(predictions, actuals)?,
            rmse: rmse(predictions, actuals)?,
            nrmse,
            accuracy: None,
            f1: None,
            per_user: per_user_mae(users, predictions, actuals),
            margins: BTreeMap::new(),
        })
    }

    /// Classification report; a probability of at least 0.5 predicts the goal.
    pub fn classification(
        experiment: impl Into<String>,
        config: &ModelConfig,
        users: &[UserId],
        probabilities: &[f64],
        labels: &[bool],
    ) -> Result<Self> {
        let targets: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
        let mut report = Self::regression(experiment, config, users, probabilities, &targets)?;
        let predicted: Vec<bool> = probabilities.iter().map(|&p| p >= 0.5).collect();
        let (accuracy, f1) = accuracy_f1(&predicted, labels)?;
        report.accuracy = Some(accuracy);
        report.f1 = Some(f1);
        Ok(report)
    }

    /// Record `(self − baseline)/baseline` under `name`.
    pub fn add_margin(&mut self, name: impl Into<String>, baseline_mae: f64) -> Result<()> {
        self.margins
            .insert(name.into(), relative_margin(self.mae, baseline_mae)?);
        Ok(())
    }

    /// Σ m_user·mae_user / Σ m_user.
    pub fn weighted_user_mae(&self) -> f64 {
        let (num, den) = self
            .per_user
            .values()
            .fold((0.0, 0usize), |(s, n), u| (s + u.mae * u.m as f64, n + u.m));
        num / den as f64
    }
}

fn per_user_mae(
    users: &[UserId],
    predictions: &[f64],
    actuals: &[f64],
) -> BTreeMap<UserId, UserMetrics> {
    let mut sums: BTreeMap<UserId, (usize, f64)> = BTreeMap::new();
    for ((u, p), a) in users.iter().zip(predictions).zip(actuals) {
        let e = sums.entry(u.clone()).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += (a - p).abs();
    }
    sums.into_iter()
        .map(|(u, (m, s))| {
            (
                u,
                UserMetrics {
                    m,
                    mae: s / m as f64,
                },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_forced_cases() {
        let y = [5.0, 7.0, 9.0];
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        assert_eq!(nrmse(&y, &y).unwrap(), 0.0);
        assert_eq!(mae(&[6000.0, 4000.0], &[5000.0, 5000.0]).unwrap(), 1000.0);
        let r = nrmse(&[127.0; 4], &[100.0; 4]).unwrap();
        assert!((r - 0.27).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(mae(&[], &[]), Err(Error::EmptyInput(_))));
        assert!(matches!(mae(&[1.0], &[1.0, 2.0]), Err(Error::Shape { .. })));
        assert!(matches!(
            nrmse(&[1.0, 1.0], &[1.0, -1.0]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(accuracy_f1(&[], &[]), Err(Error::EmptyInput(_))));
        assert!(relative_margin(1.0, 0.0).is_err());
    }

    #[test]
    fn classification_conventions() {
        let t = [true, false, true, true];
        assert_eq!(accuracy_f1(&t, &t).unwrap(), (1.0, 1.0));
        let none = [false; 4];
        let (acc, f1) = accuracy_f1(&none, &t).unwrap();
        assert_eq!(acc, 0.25);
        assert_eq!(f1, 0.0);
        assert_eq!(accuracy_f1(&none, &none).unwrap(), (1.0, 0.0));
    }

    #[test]
    fn margins_match_published_pairs() {
        assert_eq!(
            format_margin(relative_margin(1989.0, 2978.0).unwrap()),
            "-33%"
        );
        assert_eq!(
            format_margin(relative_margin(4194.0, 4100.0).unwrap()),
            "+2%"
        );
        assert_eq!(
            format_margin(relative_margin(2500.0, 2500.0).unwrap()),
            "0%"
        );
        assert_eq!(format_margin(-0.001), "0%");
    }

    fn random_case(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
        let p = (0..n).map(|_| rng.gen_range(0.0..15000.0)).collect();
        let a = (0..n).map(|_| rng.gen_range(1.0..15000.0)).collect();
        (p, a)
    }

    #[test]
    fn regression_metrics_match_loop_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..1000 {
            let n = 1 + case % 97;
            let (p, a) = random_case(&mut rng, n);
            let mut abs = 0.0;
            let mut sq = 0.0;
            let mut total = 0.0;
            for i in 0..n {
                abs += (p[i] - a[i]).abs();
                sq += (p[i] - a[i]).powi(2);
                total += a[i];
            }
            let m = n as f64;
            let want_rmse = (sq / m).sqrt();
            assert!((mae(&p, &a).unwrap() - abs / m).abs() < 1e-12 * (1.0 + abs / m));
            assert!((rmse(&p, &a).unwrap() - want_rmse).abs() < 1e-12 * (1.0 + want_rmse));
            let want_nrmse = want_rmse / (total / m);
            assert!((nrmse(&p, &a).unwrap() - want_nrmse).abs() < 1e-12 * (1.0 + want_nrmse));
            assert!(mae(&p, &a).unwrap() <= rmse(&p, &a).unwrap());
        }
    }

    #[test]
    fn classification_matches_confusion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let pred: Vec<bool> = (0..1000).map(|_| rng.gen_bool(0.4)).collect();
            let truth: Vec<bool> = (0..1000).map(|_| rng.gen_bool(0.3)).collect();
            let tp = (0..1000).filter(|&i| pred[i] && truth[i]).count() as f64;
            let fp = (0..1000).filter(|&i| pred[i] && !truth[i]).count() as f64;
            let fn_ = (0..1000).filter(|&i| !pred[i] && truth[i]).count() as f64;
            let correct = (0..1000).filter(|&i| pred[i] == truth[i]).count() as f64;
            let want_f1 = 2.0 * tp / (2.0 * tp + fp + fn_);
            let (acc, f1) = accuracy_f1(&pred, &truth).unwrap();
            assert_eq!(acc, correct / 1000.0);
            assert!((f1 - want_f1).abs() < 1e-12);
        }
    }

    #[test]
    fn report_per_user_weighting() {
        let users: Vec<UserId> = ["a", "a", "b", "c", "c", "c"].map(UserId::from).to_vec();
        let p = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let a = [2.0, 2.0, 5.0, 4.0, 1.0, 6.0];
        let r = MetricsReport::regression("x", &ModelConfig::default(), &users, &p, &a).unwrap();
        assert_eq!(r.m, 6);
        assert_eq!(r.per_user.values().map(|u| u.m).sum::<usize>(), r.m);
        assert_eq!(
            r.per_user[&UserId::from("a")],
            UserMetrics { m: 2, mae: 0.5 }
        );
        assert!((r.weighted_user_mae() - r.mae).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn mae_never_exceeds_rmse(
            pairs in proptest::collection::vec((-1e4f64..1e4, -1e4f64..1e4), 1..200)
        ) {
            let (p, a): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let m = mae(&p, &a).unwrap();
            let r = rmse(&p, &a).unwrap();
            prop_assert!(m <= r * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn equal_errors_make_mae_equal_rmse(e in 0.0f64..1e3, n in 1usize..50) {
            let a: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let p: Vec<f64> = a.iter().enumerate()
                .map(|(i, v)| if i % 2 == 0 { v + e } else { v - e }).collect();
            let m = mae(&p, &a).unwrap();
            let r = rmse(&p, &a).unwrap();
            prop_assert!((m - r).abs() <= 1e-9 * (1.0 + r));
        }

        #[test]
        fn pooled_mae_is_weighted_user_mean(
            rows in proptest::collection::vec((0u8..6, 0.0f64..1e4, 0.0f64..1e4), 1..300)
        ) {
            let users: Vec<UserId> = rows.iter().map(|r| UserId::new(format!("u{}", r.0))).collect();
            let p: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let a: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let rep = MetricsReport::regression("p", &ModelConfig::default(), &users, &p, &a).unwrap();
            prop_assert_eq!(rep.per_user.values().map(|u| u.m).sum::<usize>(), rep.m);
            prop_assert!((rep.weighted_user_mae() - rep.mae).abs() <= 1e-9 * (1.0 + rep.mae));
        }
    }
}
