//! Minute-level stream ingestion, daily aggregation and validity filters.
//!
//! Activity and engagement arrive as per-minute CSV streams. Each user-day is
//! collapsed into a [`DailyFeatures`] row holding a 57-dimensional engagement
//! vector and an 8-dimensional activity vector. Days with less than 600 wear
//! minutes are dropped, then users with fewer than 10 remaining days.

mod features;
mod stream;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

pub use features::{
    aggregate_day, build_daily_features, filter_valid_days, filter_valid_users, preprocess,
    read_daily_features_csv, write_daily_features_csv, DailyFeatures, PreprocessSummary,
    ACTIVITY_DIM, ACTIVITY_NAMES, ENGAGEMENT_DIM, MIN_VALID_DAYS, MIN_WEAR_MINUTES,
};
pub use stream::{
    parse_activity, parse_engagement, parse_streams, write_activity_csv, write_activity_rows,
    write_engagement_csv, write_engagement_rows, ACTIVITY_HEADER, ENGAGEMENT_HEADER,
};

pub const MINUTES_PER_DAY: u16 = 1440;

/// Opaque participant identifier. Cheap to clone.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(Arc<str>);

impl UserId {
    pub fn new(id: impl AsRef<str>) -> Self {
        UserId(Arc::from(id.as_ref()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for UserId {
    fn from(s: &str) -> Self {
        UserId::new(s)
    }
}

/// Per-minute activity intensity label as exported by the wearable pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensity {
    Nonwear,
    Sedentary,
    Light,
    Mvpa,
}

impl Intensity {
    pub fn as_str(self) -> &'static str {
        match self {
            Intensity::Nonwear => "nonwear",
            Intensity::Sedentary => "sedentary",
            Intensity::Light => "light",
            Intensity::Mvpa => "mvpa",
        }
    }

    pub fn parse(label: &str) -> Option<Self> {
        match label {
            "nonwear" => Some(Intensity::Nonwear),
            "sedentary" => Some(Intensity::Sedentary),
            "light" => Some(Intensity::Light),
            "mvpa" => Some(Intensity::Mvpa),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinuteActivityRecord {
    pub user_id: UserId,
    pub date: NaiveDate,
    pub minute_of_day: u16,
    pub steps: u32,
    pub intensity: Intensity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngagementMinuteRecord {
    pub user_id: UserId,
    pub date: NaiveDate,
    pub minute_of_day: u16,
    /// Fraction of this minute the app spent in the foreground.
    pub foreground_minutes: f64,
    /// App-open events starting in this minute.
    pub opens: u32,
}

/// Valid days per user, chronologically ordered.
pub type UserDays = BTreeMap<UserId, Vec<DailyFeatures>>;
