//! Report tables rendered from [`RunResults`].
//!
//! Each stage yields one CSV (full-precision numbers) and one aligned
//! plain-text table (rounded for reading). Rendering is a pure function of
//! the results, so stored results re-render byte-identically.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::format_margin;
use super::runner::{RunResults, Stage};
use crate::error::Result;
use crate::forecasters::{Architecture, Modality};

/// Header plus string cells; every row has the header's width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| crate::error::Error::State(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Columns padded to their widest cell; first column left-aligned, the
    /// rest right-aligned.
    pub fn to_text(&self) -> String {
        let widths: Vec<usize> = (0..self.header.len())
            .map(|c| {
                std::iter::once(&self.header[c])
                    .chain(self.rows.iter().map(|r| &r[c]))
                    .map(|s| s.chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| -> String {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (s, &w))| {
                    if i == 0 {
                        format!("{s:<w$}")
                    } else {
                        format!("{s:>w$}")
                    }
                })
                .collect();
            parts.join("  ").trim_end().to_string()
        };
        let total = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
        let mut out = line(&self.header);
        out.push('\n');
        out.push_str(&"-".repeat(total));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

/// One report: `{experiment}_{dataset}.csv` and `.txt`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFile {
    pub experiment: &'static str,
    pub csv: String,
    pub text: String,
}

impl ReportFile {
    pub fn csv_name(&self, dataset: &str) -> String {
        format!("{}_{dataset}.csv", self.experiment)
    }

    pub fn text_name(&self, dataset: &str) -> String {
        format!("{}_{dataset}.txt", self.experiment)
    }
}

fn full(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn count(v: Option<usize>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn fixed(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.digits$}"))
}

fn margin(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), format_margin)
}

fn preprocessing_report(r: &RunResults) -> Result<ReportFile> {
    let p = &r.preprocessing;
    let mut t = Table::new(&["statistic", "value"]);
    let stats: [(&str, String); 8] = [
        ("users_before", p.users_before.to_string()),
        ("users_after", p.users_after.to_string()),
        ("days_before", p.days_before.to_string()),
        ("valid_days", p.valid_days.to_string()),
        ("mean_valid_days", p.mean_valid_days.to_string()),
        ("sd_valid_days", p.sd_valid_days.to_string()),
        ("mean_wear_hours", p.mean_wear_hours.to_string()),
        ("mean_daily_steps", p.mean_daily_steps.to_string()),
    ];
    for (k, v) in &stats {
        t.push(vec![k.to_string(), v.clone()]);
    }
    let mut text = format!("Preprocessing ({})\n", r.settings.dataset);
    let mut view = Table::new(&["statistic", "value"]);
    view.push(vec![
        "users (before -> after)".into(),
        format!("{} -> {}", p.users_before, p.users_after),
    ]);
    view.push(vec![
        "valid days".into(),
        format!("{} of {}", p.valid_days, p.days_before),
    ]);
    view.push(vec![
        "valid days per user".into(),
        format!("{:.2} +- {:.2}", p.mean_valid_days, p.sd_valid_days),
    ]);
    view.push(vec![
        "wear hours per valid day".into(),
        format!("{:.2}", p.mean_wear_hours),
    ]);
    view.push(vec![
        "steps per valid day".into(),
        format!("{:.0}", p.mean_daily_steps),
    ]);
    if let Some(s) = &r.split {
        view.push(vec![
            "participants train/val/test".into(),
            format!(
                "{}/{}/{}",
                s.train_users.len(),
                s.val_users.len(),
                s.test_users.len()
            ),
        ]);
    }
    text.push_str(&view.to_text());
    Ok(ReportFile {
        experiment: "preprocessing",
        csv: t.to_csv()?,
        text,
    })
}

fn sweep_report(r: &RunResults) -> Result<ReportFile> {
    let mut t = Table::new(&[
        "modality", "window", "cell", "m", "test_mae", "val_mae", "selected",
    ]);
    for c in &r.sweep {
        t.push(vec![
            c.modality.to_string(),
            c.window.to_string(),
            c.cell.clone(),
            count(c.m),
            full(c.test_mae),
            full(c.val_mae),
            c.selected.to_string(),
        ]);
    }
    let windows = &r.settings.windows;
    let mut header = vec!["test MAE"];
    let labels: Vec<String> = windows.iter().map(|w| format!("w={w}")).collect();
    header.extend(labels.iter().map(String::as_str));
    let mut test_view = Table::new(&header);
    let mut val_view = Table::new(&header);
    val_view.header[0] = "val MAE".into();
    for m in Modality::ALL {
        let mut test_row = vec![m.to_string()];
        let mut val_row = vec![m.to_string()];
        for w in windows {
            let cell = r.sweep.iter().find(|c| c.modality == m && c.window == *w);
            let mark = if cell.is_some_and(|c| c.selected) {
                "*"
            } else {
                ""
            };
            test_row.push(format!("{}{mark}", fixed(cell.and_then(|c| c.test_mae), 0)));
            val_row.push(fixed(cell.and_then(|c| c.val_mae), 0));
        }
        test_view.push(test_row);
        val_view.push(val_row);
    }
    let text = format!(
        "Window sweep ({}), next-day steps; * marks the selected window\n{}\n{}",
        r.settings.dataset,
        test_view.to_text(),
        val_view.to_text()
    );
    Ok(ReportFile {
        experiment: "window_sweep",
        csv: t.to_csv()?,
        text,
    })
}

fn baseline_report(r: &RunResults) -> Result<Option<ReportFile>> {
    let Some(b) = &r.baseline else {
        return Ok(None);
    };
    let mut t = Table::new(&[
        "model",
        "modality",
        "window",
        "m",
        "mae",
        "rmse",
        "nrmse",
        "early_fusion_margin",
    ]);
    for row in &b.rows {
        t.push(vec![
            row.architecture.to_string(),
            row.architecture.modality().to_string(),
            b.window.to_string(),
            count(row.m),
            full(row.mae),
            full(row.rmse),
            full(row.nrmse),
            margin(row.margin),
        ]);
    }
    let mut view = Table::new(&["model", "MAE", "early-fusion margin"]);
    for row in &b.rows {
        view.push(vec![
            row.architecture.to_string(),
            fixed(row.mae, 0),
            margin(row.margin),
        ]);
    }
    let mut margins = Table::new(&["baseline", "model", "baseline MAE", "margin"]);
    for m in &b.margins {
        margins.push(vec![
            m.baseline.clone(),
            m.architecture.to_string(),
            format!("{:.0}", m.baseline_mae),
            format_margin(m.margin),
        ]);
    }
    let mut text = format!(
        "Baselines ({}), next-day steps, w = {}\n{}\nEarly-fusion LSTM against baselines (negative = lower MAE)\n{}",
        r.settings.dataset,
        b.window,
        view.to_text(),
        margins.to_text()
    );
    let _ = writeln!(
        text,
        "training-mean predictor MAE: {}",
        fixed(b.train_mean_mae, 0)
    );
    Ok(Some(ReportFile {
        experiment: "baseline",
        csv: t.to_csv()?,
        text,
    }))
}

fn classification_report(r: &RunResults) -> Result<ReportFile> {
    let mut t = Table::new(&["threshold", "model", "m", "accuracy", "f1", "prevalence"]);
    for c in &r.classification {
        t.push(vec![
            c.threshold.to_string(),
            c.architecture.to_string(),
            count(c.m),
            full(c.accuracy),
            full(c.f1),
            full(c.prevalence),
        ]);
    }
    let archs: BTreeSet<Architecture> = r.classification.iter().map(|c| c.architecture).collect();
    let mut thresholds: Vec<u32> = r.classification.iter().map(|c| c.threshold).collect();
    thresholds.sort_unstable();
    thresholds.dedup();
    let names: Vec<String> = archs.iter().map(|a| a.to_string()).collect();
    let mut text = format!("Goal classification ({})\n", r.settings.dataset);
    for (metric, pick) in [
        (
            "accuracy",
            (|c: &super::ClassificationRow| c.accuracy) as fn(&_) -> _,
        ),
        ("F1", |c: &super::ClassificationRow| c.f1),
    ] {
        let mut header = vec![metric, "goal"];
        header.extend(names.iter().map(String::as_str));
        let mut view = Table::new(&header);
        for &th in &thresholds {
            let mut row = vec![String::new(), th.to_string()];
            for &a in &archs {
                let cell = r
                    .classification
                    .iter()
                    .find(|c| c.threshold == th && c.architecture == a);
                row.push(fixed(cell.and_then(pick), 2));
            }
            view.push(row);
        }
        text.push_str(&view.to_text());
    }
    Ok(ReportFile {
        experiment: "classification",
        csv: t.to_csv()?,
        text,
    })
}

fn cohort_report(r: &RunResults) -> Result<ReportFile> {
    let mut t = Table::new(&["percentile", "modality", "users", "m", "mae", "available"]);
    for c in &r.cohorts {
        t.push(vec![
            c.percentile.to_string(),
            c.modality.to_string(),
            c.users.to_string(),
            count(c.m),
            full(c.mae),
            c.available.to_string(),
        ]);
    }
    let mut percentiles: Vec<u32> = r.cohorts.iter().map(|c| c.percentile).collect();
    percentiles.sort_unstable();
    percentiles.dedup();
    let labels: Vec<String> = percentiles.iter().map(|p| format!("p{p}")).collect();
    let mut header = vec!["test MAE"];
    header.extend(labels.iter().map(String::as_str));
    let mut view = Table::new(&header);
    for m in Modality::ALL {
        let mut row = vec![m.to_string()];
        for &p in &percentiles {
            let cell = r
                .cohorts
                .iter()
                .find(|c| c.modality == m && c.percentile == p);
            row.push(match cell {
                Some(c) if !c.available => "n/a".to_string(),
                Some(c) => fixed(c.mae, 0),
                None => "NA".to_string(),
            });
        }
        view.push(row);
    }
    let mut sizes = vec!["users".to_string()];
    for &p in &percentiles {
        let n = r
            .cohorts
            .iter()
            .find(|c| c.percentile == p)
            .map_or(0, |c| c.users);
        sizes.push(n.to_string());
    }
    view.push(sizes);
    let text = format!(
        "Engagement-percentile cohorts ({}), retrained per cohort\n{}",
        r.settings.dataset,
        view.to_text()
    );
    Ok(ReportFile {
        experiment: "cohorts",
        csv: t.to_csv()?,
        text,
    })
}

fn per_user_report(r: &RunResults) -> Result<ReportFile> {
    let mut t = Table::new(&["user_id", "m", "early_mae", "late_mae", "early_better"]);
    let mut view = Table::new(&["user", "m", "early MAE", "late MAE", "lower"]);
    for u in &r.per_user {
        let better = u.early_mae < u.late_mae;
        t.push(vec![
            u.user_id.to_string(),
            u.m.to_string(),
            u.early_mae.to_string(),
            u.late_mae.to_string(),
            better.to_string(),
        ]);
        view.push(vec![
            u.user_id.to_string(),
            u.m.to_string(),
            format!("{:.0}", u.early_mae),
            format!("{:.0}", u.late_mae),
            if better { "early" } else { "late" }.into(),
        ]);
    }
    let wins = r
        .per_user
        .iter()
        .filter(|u| u.early_mae < u.late_mae)
        .count();
    let text = format!(
        "Per-test-user MAE, early vs late fusion ({})\n{}early fusion lower for {wins} of {} participants\n",
        r.settings.dataset,
        view.to_text(),
        r.per_user.len()
    );
    Ok(ReportFile {
        experiment: "per_user",
        csv: t.to_csv()?,
        text,
    })
}

fn outcome_report(r: &RunResults) -> Result<ReportFile> {
    let mut t = Table::new(&["outcome", "m", "mae", "rmse", "nrmse"]);
    let mut view = Table::new(&["outcome", "MAE", "NRMSE"]);
    for o in &r.outcomes {
        t.push(vec![
            o.outcome.to_string(),
            count(o.m),
            full(o.mae),
            full(o.rmse),
            full(o.nrmse),
        ]);
        view.push(vec![
            o.outcome.to_string(),
            fixed(o.mae, 0),
            fixed(o.nrmse, 2),
        ]);
    }
    let text = format!(
        "Additional outcomes, early-fusion LSTM ({})\n{}",
        r.settings.dataset,
        view.to_text()
    );
    Ok(ReportFile {
        experiment: "additional_outcomes",
        csv: t.to_csv()?,
        text,
    })
}

/// One report per stage that ran, in stage order.
pub fn render_reports(results: &RunResults) -> Result<Vec<ReportFile>> {
    let mut out = Vec::new();
    for &stage in &Stage::ALL {
        if !results.settings.stages.contains(&stage) {
            continue;
        }
        let report = match stage {
            Stage::Preprocess => Some(preprocessing_report(results)?),
            Stage::Sweep => Some(sweep_report(results)?),
            Stage::Baseline => baseline_report(results)?,
            Stage::Classification => Some(classification_report(results)?),
            Stage::Cohorts => Some(cohort_report(results)?),
            Stage::PerUser => Some(per_user_report(results)?),
            Stage::Outcomes => Some(outcome_report(results)?),
        };
        out.extend(report);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_alignment_and_csv_quoting() {
        let mut t = Table::new(&["name", "value"]);
        t.push(vec!["a".into(), "1".into()]);
        t.push(vec!["long, name".into(), "22".into()]);
        assert_eq!(
            t.to_text(),
            "name        value\n-----------------\na               1\nlong, name     22\n"
        );
        assert_eq!(t.to_csv().unwrap(), "name,value\na,1\n\"long, name\",22\n");
    }
}
