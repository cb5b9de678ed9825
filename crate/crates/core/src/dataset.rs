//! Windowed multimodal examples, participant splits, z-score normalization,
//! goal labels and engagement-percentile cohorts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::ingest::{DailyFeatures, UserDays, UserId, ACTIVITY_DIM, ENGAGEMENT_DIM};

/// Window sizes explored by the sweep.
pub const WINDOW_SIZES: [usize; 4] = [3, 7, 14, 21];

/// Floor applied to every standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// A next-day quantity that can be forecast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Steps,
    SedMinutes,
    WearTime,
    LpaMinutes,
}

impl Outcome {
    pub const ALL: [Outcome; 4] = [
        Outcome::Steps,
        Outcome::SedMinutes,
        Outcome::WearTime,
        Outcome::LpaMinutes,
    ];

    /// Column of the activity vector holding this outcome.
    pub fn activity_index(self) -> usize {
        match self {
            Outcome::Steps => 0,
            Outcome::SedMinutes => 1,
            Outcome::LpaMinutes => 2,
            Outcome::WearTime => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Steps => "steps",
            Outcome::SedMinutes => "sed_minutes",
            Outcome::WearTime => "wear_time",
            Outcome::LpaMinutes => "lpa_minutes",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Outcome {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Outcome::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown outcome {s:?}")))
    }
}

/// `w` consecutive retained days of both modalities plus next-day targets.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedExample {
    pub user_id: UserId,
    pub target_date: NaiveDate,
    /// Date of each window row, strictly increasing.
    pub dates: Vec<NaiveDate>,
    /// w×57 engagement rows.
    pub u_window: Tensor,
    /// w×8 activity rows.
    pub v_window: Tensor,
    pub targets: BTreeMap<Outcome, f64>,
}

impl WindowedExample {
    pub fn window(&self) -> usize {
        self.dates.len()
    }

    pub fn target(&self, outcome: Outcome) -> Result<f64> {
        self.targets
            .get(&outcome)
            .copied()
            .ok_or_else(|| Error::Config(format!("example has no {outcome} target")))
    }

    /// Build an example from explicit window days and an optional target day.
    pub fn from_days(
        window: &[DailyFeatures],
        target: Option<&DailyFeatures>,
        outcomes: &[Outcome],
    ) -> Result<Self> {
        let first = window.first().ok_or(Error::EmptyInput("window"))?;
        let w = window.len();
        let mut u = Vec::with_capacity(w * ENGAGEMENT_DIM);
        let mut v = Vec::with_capacity(w * ACTIVITY_DIM);
        for d in window {
            u.extend_from_slice(&d.engagement);
            v.extend_from_slice(&d.activity);
        }
        let last = window[w - 1].date;
        let targets = match target {
            Some(t) => outcomes
                .iter()
                .map(|&o| (o, t.activity[o.activity_index()]))
                .collect(),
            None => BTreeMap::new(),
        };
        Ok(WindowedExample {
            user_id: first.user_id.clone(),
            target_date: target.map_or_else(|| last.succ_opt().unwrap_or(last), |t| t.date),
            dates: window.iter().map(|d| d.date).collect(),
            u_window: Tensor::matrix(w, ENGAGEMENT_DIM, u)?,
            v_window: Tensor::matrix(w, ACTIVITY_DIM, v)?,
            targets,
        })
    }
}

/// Slide a `w`-day window over one user's retained days.
///
/// Produces `max(0, n − w)` examples; the target of each is the next
/// retained day. With `require_contiguous_days`, only windows whose days and
/// target are consecutive calendar days are kept.
pub fn build_windows(
    days: &[DailyFeatures],
    w: usize,
    outcomes: &[Outcome],
    require_contiguous_days: bool,
) -> Result<Vec<WindowedExample>> {
    if w == 0 {
        return Err(Error::Config("window size must be positive".into()));
    }
    if days.len() <= w {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(days.len() - w);
    for end in w..days.len() {
        let window = &days[end - w..end];
        let target = &days[end];
        if require_contiguous_days {
            let contiguous = window
                .iter()
                .chain(std::iter::once(target))
                .zip(window.iter().skip(1).chain(std::iter::once(target)))
                .all(|(a, b)| (b.date - a.date).num_days() == 1);
            if !contiguous {
                continue;
            }
        }
        out.push(WindowedExample::from_days(window, Some(target), outcomes)?);
    }
    Ok(out)
}

/// Windows for a subset of users, in user order.
pub fn windows_for_users(
    users: &UserDays,
    ids: &BTreeSet<UserId>,
    w: usize,
    outcomes: &[Outcome],
    require_contiguous_days: bool,
) -> Result<Vec<WindowedExample>> {
    let per_user = ids
        .par_iter()
        .map(|id| match users.get(id) {
            Some(days) => build_windows(days, w, outcomes, require_contiguous_days),
            None => Ok(Vec::new()),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_user.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Disjoint participant sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_users: BTreeSet<UserId>,
    pub val_users: BTreeSet<UserId>,
    pub test_users: BTreeSet<UserId>,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn split_of(&self, user: &UserId) -> Option<Split> {
        if self.train_users.contains(user) {
            Some(Split::Train)
        } else if self.val_users.contains(user) {
            Some(Split::Val)
        } else if self.test_users.contains(user) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn users(&self, split: Split) -> &BTreeSet<UserId> {
        match split {
            Split::Train => &self.train_users,
            Split::Val => &self.val_users,
            Split::Test => &self.test_users,
        }
    }
}

/// Shuffle participants with `seed` and cut test, validation and training
/// sets. The test set holds `max(1, round(n · test_fraction))` users.
pub fn split_participants<'a>(
    users: impl IntoIterator<Item = &'a UserId>,
    test_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<SplitAssignment> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction {test_fraction} must lie in (0, 1)"
        )));
    }
    if !(val_fraction >= 0.0 && val_fraction < 1.0 - test_fraction) {
        return Err(Error::Config(format!(
            "val_fraction {val_fraction} must lie in [0, 1 - test_fraction)"
        )));
    }
    let mut ids: Vec<UserId> = users.into_iter().cloned().collect();
    ids.sort();
    ids.dedup();
    let n = ids.len();
    if n < 3 {
        return Err(Error::Split(format!("need at least 3 users, got {n}")));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).max(1);
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 {
        n_val = n_val.max(1);
    }
    if n_test + n_val >= n {
        return Err(Error::Split(format!(
            "{n} users leave no training participants after {n_test} test and {n_val} validation"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let test_users = ids[..n_test].iter().cloned().collect();
    let val_users = ids[n_test..n_test + n_val].iter().cloned().collect();
    let train_users = ids[n_test + n_val..].iter().cloned().collect();
    Ok(SplitAssignment {
        train_users,
        val_users,
        test_users,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub mean: f64,
    pub std: f64,
}

/// Training-split z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub engagement_mean: Vec<f64>,
    pub engagement_std: Vec<f64>,
    pub activity_mean: Vec<f64>,
    pub activity_std: Vec<f64>,
    pub targets: BTreeMap<Outcome, TargetStats>,
}

fn column_stats<'a>(
    blocks: impl Iterator<Item = (usize, &'a [f64])> + Clone,
    dim: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; dim];
    let mut count = 0usize;
    for (rows, values) in blocks.clone() {
        for r in 0..rows {
            for (s, x) in sum.iter_mut().zip(&values[r * dim..(r + 1) * dim]) {
                *s += x;
            }
        }
        count += rows;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; dim];
    for (rows, values) in blocks {
        for r in 0..rows {
            for ((s, x), m) in sq
                .iter_mut()
                .zip(&values[r * dim..(r + 1) * dim])
                .zip(&mean)
            {
                *s += (x - m) * (x - m);
            }
        }
    }
    let std = sq
        .iter()
        .map(|s| (s / count as f64).sqrt().max(STD_FLOOR))
        .collect();
    (mean, std)
}

/// Per-feature mean and population standard deviation over every window row
/// of the training examples, plus per-outcome target statistics.
pub fn fit_normalization(train: &[WindowedExample]) -> Result<NormalizationStats> {
    if train.is_empty() {
        return Err(Error::EmptyInput("normalization needs training examples"));
    }
    let (engagement_mean, engagement_std) = column_stats(
        train
            .iter()
            .map(|e| (e.u_window.rows(), e.u_window.values())),
        ENGAGEMENT_DIM,
    );
    let (activity_mean, activity_std) = column_stats(
        train
            .iter()
            .map(|e| (e.v_window.rows(), e.v_window.values())),
        ACTIVITY_DIM,
    );
    let mut targets = BTreeMap::new();
    for &o in train[0].targets.keys() {
        let ys: Vec<f64> = train.iter().map(|e| e.target(o)).collect::<Result<_>>()?;
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / ys.len() as f64;
        targets.insert(
            o,
            TargetStats {
                mean,
                std: var.sqrt().max(STD_FLOOR),
            },
        );
    }
    Ok(NormalizationStats {
        engagement_mean,
        engagement_std,
        activity_mean,
        activity_std,
        targets,
    })
}

fn map_rows(t: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
    let c = t.cols();
    let values = t
        .values()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(i % c, x))
        .collect();
    Tensor::from_vec(t.shape(), values).expect("same shape")
}

impl NormalizationStats {
    pub fn target_stats(&self, outcome: Outcome) -> Result<TargetStats> {
        self.targets
            .get(&outcome)
            .copied()
            .ok_or_else(|| Error::Config(format!("no normalization statistics for {outcome}")))
    }

    pub fn normalize_target(&self, outcome: Outcome, y: f64) -> Result<f64> {
        let s = self.target_stats(outcome)?;
        Ok((y - s.mean) / s.std)
    }

    pub fn denormalize_target(&self, outcome: Outcome, z: f64) -> Result<f64> {
        let s = self.target_stats(outcome)?;
        Ok(z * s.std + s.mean)
    }
}

/// Z-score every input feature and target with training statistics.
pub fn apply_normalization(
    example: &WindowedExample,
    stats: &NormalizationStats,
) -> Result<WindowedExample> {
    let targets = example
        .targets
        .iter()
        .map(|(&o, &y)| Ok((o, stats.normalize_target(o, y)?)))
        .collect::<Result<_>>()?;
    Ok(WindowedExample {
        u_window: map_rows(&example.u_window, |c, x| {
            (x - stats.engagement_mean[c]) / stats.engagement_std[c]
        }),
        v_window: map_rows(&example.v_window, |c, x| {
            (x - stats.activity_mean[c]) / stats.activity_std[c]
        }),
        targets,
        ..example.clone()
    })
}

/// Inverse of [`apply_normalization`].
pub fn invert_normalization(
    example: &WindowedExample,
    stats: &NormalizationStats,
) -> Result<WindowedExample> {
    let targets = example
        .targets
        .iter()
        .map(|(&o, &z)| Ok((o, stats.denormalize_target(o, z)?)))
        .collect::<Result<_>>()?;
    Ok(WindowedExample {
        u_window: map_rows(&example.u_window, |c, z| {
            z * stats.engagement_std[c] + stats.engagement_mean[c]
        }),
        v_window: map_rows(&example.v_window, |c, z| {
            z * stats.activity_std[c] + stats.activity_mean[c]
        }),
        targets,
        ..example.clone()
    })
}

/// 1 when next-day steps are strictly over `threshold`.
pub fn label_goal(example: &WindowedExample, threshold: f64) -> Result<bool> {
    Ok(example.target(Outcome::Steps)? > threshold)
}

/// Mean daily app minutes used over a user's days (0 for no days).
pub fn mean_minutes_used(days: &[DailyFeatures]) -> f64 {
    if days.is_empty() {
        return 0.0;
    }
    days.iter().map(DailyFeatures::minutes_used).sum::<f64>() / days.len() as f64
}

/// Users whose engagement percentile rank is at least `percentile`.
///
/// A user's rank is the share of users with strictly lower mean daily minutes
/// used, times 100; percentile 0 keeps everyone and tied users share a rank.
pub fn select_engaged_cohort(users: &UserDays, percentile: f64) -> BTreeSet<UserId> {
    let scores: Vec<(&UserId, f64)> = users
        .iter()
        .map(|(u, days)| (u, mean_minutes_used(days)))
        .collect();
    let n = scores.len() as f64;
    scores
        .iter()
        .filter(|(_, s)| {
            let below = scores.iter().filter(|(_, o)| o < s).count() as f64;
            below / n * 100.0 >= percentile
        })
        .map(|(u, _)| (*u).clone())
        .collect()
}
