use std::collections::BTreeMap;
use std::io::{BufWriter, Read, Write};
use std::sync::OnceLock;

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    EngagementMinuteRecord, Intensity, MinuteActivityRecord, UserDays, UserId, MINUTES_PER_DAY,
};
use crate::error::{Error, Result};

pub const ENGAGEMENT_DIM: usize = 57;
pub const ACTIVITY_DIM: usize = 8;

/// A day counts as valid with at least this many wear minutes (10 h).
pub const MIN_WEAR_MINUTES: f64 = 600.0;
/// A user is kept with at least this many valid days.
pub const MIN_VALID_DAYS: usize = 10;

pub(crate) const ENG_MINUTES_USED: usize = 0;
pub(crate) const ENG_TIMES_OPENED: usize = 1;
pub(crate) const ENG_DOW: usize = 2;
pub(crate) const ENG_MINUTES_HOURLY: usize = 9;
pub(crate) const ENG_OPENS_HOURLY: usize = 33;

pub(crate) const ACT_STEPS: usize = 0;
pub(crate) const ACT_SED: usize = 1;
pub(crate) const ACT_LPA: usize = 2;
pub(crate) const ACT_MVPA: usize = 3;
pub(crate) const ACT_WEAR: usize = 4;
pub(crate) const ACT_SED_RATIO: usize = 5;

pub const ACTIVITY_NAMES: [&str; ACTIVITY_DIM] = [
    "total_steps",
    "sed_minutes",
    "lpa_minutes",
    "mvpa_minutes",
    "wear_time_minutes",
    "sed_ratio",
    "lpa_ratio",
    "mvpa_ratio",
];

/// Column names of the engagement vector, in layout order.
pub fn engagement_names() -> &'static [String] {
    static NAMES: OnceLock<Vec<String>> = OnceLock::new();
    NAMES.get_or_init(|| {
        let mut names = vec!["minutes_used".to_string(), "times_opened".to_string()];
        names.extend((0..7).map(|d| format!("dow_{d}")));
        names.extend((0..24).map(|h| format!("minutes_used_h{h:02}")));
        names.extend((0..24).map(|h| format!("times_opened_h{h:02}")));
        debug_assert_eq!(names.len(), ENGAGEMENT_DIM);
        names
    })
}

/// One user-day of engagement (u) and activity (v) features.
///
/// Engagement layout: `[0]` minutes used, `[1]` times opened, `[2..9]`
/// one-hot day of week (Monday first), `[9..33]` minutes used per hour,
/// `[33..57]` times opened per hour.
///
/// Activity layout: total steps, sedentary / light / MVPA minutes, wear time
/// in minutes, then the sedentary / light / MVPA share of wear time.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyFeatures {
    pub user_id: UserId,
    pub date: NaiveDate,
    /// 0 = Monday .. 6 = Sunday.
    pub day_of_week: u8,
    pub engagement: [f64; ENGAGEMENT_DIM],
    pub activity: [f64; ACTIVITY_DIM],
}

impl DailyFeatures {
    pub fn total_steps(&self) -> f64 {
        self.activity[ACT_STEPS]
    }

    pub fn wear_time_minutes(&self) -> f64 {
        self.activity[ACT_WEAR]
    }

    pub fn minutes_used(&self) -> f64 {
        self.engagement[ENG_MINUTES_USED]
    }

    pub fn times_opened(&self) -> f64 {
        self.engagement[ENG_TIMES_OPENED]
    }

    /// Check the feature-table invariants; returns a description of the
    /// first violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let a = &self.activity;
        let e = &self.engagement;
        if a.iter().chain(e.iter()).any(|x| !x.is_finite()) {
            return Err("non-finite feature".into());
        }
        if a[ACT_SED] + a[ACT_LPA] + a[ACT_MVPA] != a[ACT_WEAR] {
            return Err(format!(
                "sed {} + lpa {} + mvpa {} != wear {}",
                a[ACT_SED], a[ACT_LPA], a[ACT_MVPA], a[ACT_WEAR]
            ));
        }
        let ratios = &a[ACT_SED_RATIO..ACT_SED_RATIO + 3];
        if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(format!("ratio outside [0,1]: {ratios:?}"));
        }
        let ratio_sum: f64 = ratios.iter().sum();
        if a[ACT_WEAR] > 0.0 {
            if (ratio_sum - 1.0).abs() > 1e-9 {
                return Err(format!("ratios sum to {ratio_sum}"));
            }
        } else if ratio_sum != 0.0 {
            return Err("nonzero ratios with zero wear time".into());
        }
        let hourly_minutes: f64 = e[ENG_MINUTES_HOURLY..ENG_MINUTES_HOURLY + 24].iter().sum();
        if (hourly_minutes - e[ENG_MINUTES_USED]).abs() > 1e-9 * e[ENG_MINUTES_USED].max(1.0) {
            return Err(format!(
                "hourly minutes {hourly_minutes} != minutes used {}",
                e[ENG_MINUTES_USED]
            ));
        }
        let hourly_opens: f64 = e[ENG_OPENS_HOURLY..ENG_OPENS_HOURLY + 24].iter().sum();
        if hourly_opens != e[ENG_TIMES_OPENED] {
            return Err(format!(
                "hourly opens {hourly_opens} != times opened {}",
                e[ENG_TIMES_OPENED]
            ));
        }
        let onehot = &e[ENG_DOW..ENG_DOW + 7];
        for (d, &x) in onehot.iter().enumerate() {
            let want = if d == usize::from(self.day_of_week) {
                1.0
            } else {
                0.0
            };
            if x != want {
                return Err(format!(
                    "day-of-week one-hot {onehot:?} vs {}",
                    self.day_of_week
                ));
            }
        }
        if u32::from(self.day_of_week) != self.date.weekday().num_days_from_monday() {
            return Err("day_of_week disagrees with date".into());
        }
        Ok(())
    }
}

/// Collapse one user-day of minute records into daily features.
///
/// Minutes without an activity record are nonwear; minutes without an
/// engagement record carry no app usage.
pub fn aggregate_day(
    activity: &[MinuteActivityRecord],
    engagement: &[EngagementMinuteRecord],
) -> Result<DailyFeatures> {
    let (user_id, date) = match (activity.first(), engagement.first()) {
        (Some(r), _) => (r.user_id.clone(), r.date),
        (None, Some(r)) => (r.user_id.clone(), r.date),
        (None, None) => {
            return Err(Error::Aggregation(
                "no records to aggregate into a day".into(),
            ))
        }
    };
    let mixed = |u: &UserId, d: NaiveDate| {
        Error::Aggregation(format!(
            "record for {u} on {d} mixed into day {user_id} {date}"
        ))
    };

    let mut seen = [false; MINUTES_PER_DAY as usize];
    let mut steps = 0u64;
    let (mut sed, mut lpa, mut mvpa) = (0u32, 0u32, 0u32);
    for r in activity {
        if r.user_id != user_id || r.date != date {
            return Err(mixed(&r.user_id, r.date));
        }
        let slot = seen.get_mut(usize::from(r.minute_of_day)).ok_or_else(|| {
            Error::Aggregation(format!("minute {} out of range", r.minute_of_day))
        })?;
        if *slot {
            return Err(Error::Aggregation(format!(
                "duplicate activity minute {}",
                r.minute_of_day
            )));
        }
        *slot = true;
        steps += u64::from(r.steps);
        match r.intensity {
            Intensity::Nonwear => {}
            Intensity::Sedentary => sed += 1,
            Intensity::Light => lpa += 1,
            Intensity::Mvpa => mvpa += 1,
        }
    }

    let mut seen = [false; MINUTES_PER_DAY as usize];
    let mut eng = [0.0; ENGAGEMENT_DIM];
    let mut opens_hourly = [0u64; 24];
    for r in engagement {
        if r.user_id != user_id || r.date != date {
            return Err(mixed(&r.user_id, r.date));
        }
        let slot = seen.get_mut(usize::from(r.minute_of_day)).ok_or_else(|| {
            Error::Aggregation(format!("minute {} out of range", r.minute_of_day))
        })?;
        if *slot {
            return Err(Error::Aggregation(format!(
                "duplicate engagement minute {}",
                r.minute_of_day
            )));
        }
        *slot = true;
        let hour = usize::from(r.minute_of_day / 60);
        eng[ENG_MINUTES_HOURLY + hour] += r.foreground_minutes;
        opens_hourly[hour] += u64::from(r.opens);
    }
    // Sum the hourly buckets so the total equals their sum exactly.
    eng[ENG_MINUTES_USED] = eng[ENG_MINUTES_HOURLY..ENG_MINUTES_HOURLY + 24]
        .iter()
        .sum();
    for (h, &n) in opens_hourly.iter().enumerate() {
        eng[ENG_OPENS_HOURLY + h] = n as f64;
    }
    eng[ENG_TIMES_OPENED] = opens_hourly.iter().sum::<u64>() as f64;
    let day_of_week = date.weekday().num_days_from_monday() as u8;
    eng[ENG_DOW + usize::from(day_of_week)] = 1.0;

    let wear = sed + lpa + mvpa;
    let mut act = [0.0; ACTIVITY_DIM];
    act[ACT_STEPS] = steps as f64;
    act[ACT_SED] = f64::from(sed);
    act[ACT_LPA] = f64::from(lpa);
    act[ACT_MVPA] = f64::from(mvpa);
    act[ACT_WEAR] = f64::from(wear);
    if wear > 0 {
        let w = f64::from(wear);
        // lpa and mvpa shares are divided out; sed takes the remainder so the
        // three shares sum to one.
        let lpa_ratio = f64::from(lpa) / w;
        let mvpa_ratio = f64::from(mvpa) / w;
        act[ACT_SED_RATIO + 1] = lpa_ratio;
        act[ACT_SED_RATIO + 2] = mvpa_ratio;
        act[ACT_SED_RATIO] = (f64::from(sed) / w)
            .min(1.0 - lpa_ratio - mvpa_ratio)
            .max(0.0);
    }

    Ok(DailyFeatures {
        user_id,
        date,
        day_of_week,
        engagement: eng,
        activity: act,
    })
}

fn by_user_day<T>(
    records: &[T],
    key: impl Fn(&T) -> (&UserId, NaiveDate),
) -> BTreeMap<(UserId, NaiveDate), Vec<usize>> {
    let mut groups: BTreeMap<(UserId, NaiveDate), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let (u, d) = key(r);
        groups.entry((u.clone(), d)).or_default().push(i);
    }
    groups
}

/// Aggregate whole minute streams into chronologically ordered user-days.
pub fn build_daily_features(
    activity: &[MinuteActivityRecord],
    engagement: &[EngagementMinuteRecord],
) -> Result<UserDays> {
    let act_groups = by_user_day(activity, |r| (&r.user_id, r.date));
    let eng_groups = by_user_day(engagement, |r| (&r.user_id, r.date));
    let mut keys: Vec<&(UserId, NaiveDate)> = act_groups.keys().chain(eng_groups.keys()).collect();
    keys.sort();
    keys.dedup();

    let days = keys
        .par_iter()
        .map(|key| {
            let act: Vec<MinuteActivityRecord> = act_groups
                .get(*key)
                .map(|ix| ix.iter().map(|&i| activity[i].clone()).collect())
                .unwrap_or_default();
            let eng: Vec<EngagementMinuteRecord> = eng_groups
                .get(*key)
                .map(|ix| ix.iter().map(|&i| engagement[i].clone()).collect())
                .unwrap_or_default();
            aggregate_day(&act, &eng)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut users = UserDays::new();
    for day in days {
        users.entry(day.user_id.clone()).or_default().push(day);
    }
    Ok(users)
}

/// Keep days with at least 600 wear minutes, preserving order.
pub fn filter_valid_days(days: &[DailyFeatures]) -> Vec<DailyFeatures> {
    days.iter()
        .filter(|d| d.wear_time_minutes() >= MIN_WEAR_MINUTES)
        .cloned()
        .collect()
}

/// Keep users with at least 10 valid days.
pub fn filter_valid_users(users: UserDays) -> UserDays {
    users
        .into_iter()
        .filter(|(_, days)| days.len() >= MIN_VALID_DAYS)
        .collect()
}

/// Cohort statistics before and after the validity filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub users_before: usize,
    pub users_after: usize,
    pub days_before: usize,
    pub valid_days: usize,
    pub mean_valid_days: f64,
    pub sd_valid_days: f64,
    pub mean_wear_hours: f64,
    pub mean_daily_steps: f64,
}

/// Apply the day filter to every user, then the user filter.
pub fn preprocess(raw: &UserDays) -> (UserDays, PreprocessSummary) {
    let users_before = raw.len();
    let days_before = raw.values().map(Vec::len).sum();
    let valid: UserDays = raw
        .iter()
        .map(|(u, days)| (u.clone(), filter_valid_days(days)))
        .collect();
    let kept = filter_valid_users(valid);

    let counts: Vec<f64> = kept.values().map(|d| d.len() as f64).collect();
    let n = counts.len().max(1) as f64;
    let mean_valid_days = counts.iter().sum::<f64>() / n;
    let sd_valid_days = (counts
        .iter()
        .map(|c| (c - mean_valid_days).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let all_days: Vec<&DailyFeatures> = kept.values().flatten().collect();
    let nd = all_days.len().max(1) as f64;
    let mean_wear_hours = all_days.iter().map(|d| d.wear_time_minutes()).sum::<f64>() / nd / 60.0;
    let mean_daily_steps = all_days.iter().map(|d| d.total_steps()).sum::<f64>() / nd;

    let summary = PreprocessSummary {
        users_before,
        users_after: kept.len(),
        days_before,
        valid_days: all_days.len(),
        mean_valid_days,
        sd_valid_days,
        mean_wear_hours,
        mean_daily_steps,
    };
    (kept, summary)
}

fn daily_header() -> Vec<String> {
    let mut h = vec![
        "user_id".to_string(),
        "date".to_string(),
        "day_of_week".to_string(),
    ];
    h.extend(engagement_names().iter().cloned());
    h.extend(ACTIVITY_NAMES.iter().map(|s| s.to_string()));
    h
}

/// Write daily feature rows (one per user-day) as CSV.
pub fn write_daily_features_csv<'a, W: Write>(
    days: impl IntoIterator<Item = &'a DailyFeatures>,
    writer: W,
) -> std::io::Result<()> {
    let mut w = BufWriter::new(writer);
    writeln!(w, "{}", daily_header().join(","))?;
    for d in days {
        write!(
            w,
            "{},{},{}",
            d.user_id,
            d.date.format("%Y-%m-%d"),
            d.day_of_week
        )?;
        for x in d.engagement.iter().chain(d.activity.iter()) {
            write!(w, ",{x}")?;
        }
        writeln!(w)?;
    }
    w.flush()
}

/// Read rows written by [`write_daily_features_csv`], in file order.
pub fn read_daily_features_csv<R: Read>(reader: R, file: &str) -> Result<Vec<DailyFeatures>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = daily_header();
    let found = rdr.headers()?.clone();
    if found.len() != header.len() || found.iter().zip(&header).any(|(a, b)| a != b) {
        return Err(Error::Schema {
            file: file.to_string(),
            line: 1,
            message: format!(
                "daily feature header must have {} columns starting user_id,date,day_of_week",
                header.len()
            ),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            file: file.to_string(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let perr = |message: String| Error::Parse {
            file: file.to_string(),
            line,
            message,
        };
        let date = NaiveDate::parse_from_str(&rec[1], "%Y-%m-%d")
            .map_err(|e| perr(format!("bad date {:?}: {e}", &rec[1])))?;
        let day_of_week: u8 = rec[2]
            .parse()
            .map_err(|_| perr(format!("bad day_of_week {:?}", &rec[2])))?;
        let mut values = Vec::with_capacity(ENGAGEMENT_DIM + ACTIVITY_DIM);
        for (i, field) in rec.iter().enumerate().skip(3) {
            values.push(
                field
                    .parse::<f64>()
                    .map_err(|_| perr(format!("bad value {field:?} in column {}", header[i])))?,
            );
        }
        let mut engagement = [0.0; ENGAGEMENT_DIM];
        engagement.copy_from_slice(&values[..ENGAGEMENT_DIM]);
        let mut activity = [0.0; ACTIVITY_DIM];
        activity.copy_from_slice(&values[ENGAGEMENT_DIM..]);
        out.push(DailyFeatures {
            user_id: UserId::new(&rec[0]),
            date,
            day_of_week,
            engagement,
            activity,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn day() -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 1, 8).unwrap() // Wednesday
    }

    fn act(m: u16, steps: u32, intensity: Intensity) -> MinuteActivityRecord {
        MinuteActivityRecord {
            user_id: UserId::new("u1"),
            date: day(),
            minute_of_day: m,
            steps,
            intensity,
        }
    }

    fn eng(m: u16, fg: f64, opens: u32) -> EngagementMinuteRecord {
        EngagementMinuteRecord {
            user_id: UserId::new("u1"),
            date: day(),
            minute_of_day: m,
            foreground_minutes: fg,
            opens,
        }
    }

    fn with_wear(user: &str, date: NaiveDate, wear: f64) -> DailyFeatures {
        let mut activity = [0.0; ACTIVITY_DIM];
        activity[ACT_SED] = wear;
        activity[ACT_WEAR] = wear;
        DailyFeatures {
            user_id: UserId::new(user),
            date,
            day_of_week: date.weekday().num_days_from_monday() as u8,
            engagement: [0.0; ENGAGEMENT_DIM],
            activity,
        }
    }

    #[test]
    fn all_nonwear_day_is_zero() {
        let recs: Vec<_> = (0..1440).map(|m| act(m, 0, Intensity::Nonwear)).collect();
        let d = aggregate_day(&recs, &[]).unwrap();
        assert_eq!(d.wear_time_minutes(), 0.0);
        assert_eq!(d.activity, [0.0; ACTIVITY_DIM]);
        for (i, x) in d.engagement.iter().enumerate() {
            let want = if i == ENG_DOW + 2 { 1.0 } else { 0.0 };
            assert_eq!(*x, want, "engagement[{i}]");
        }
        d.check_invariants().unwrap();
    }

    #[test]
    fn sedentary_only_day() {
        let mut recs: Vec<_> = (0..600).map(|m| act(m, 0, Intensity::Sedentary)).collect();
        recs.extend((600..1440).map(|m| act(m, 0, Intensity::Nonwear)));
        let d = aggregate_day(&recs, &[]).unwrap();
        assert_eq!(d.wear_time_minutes(), 600.0);
        assert_eq!(d.activity[ACT_SED_RATIO], 1.0);
        assert_eq!(d.activity[ACT_SED_RATIO + 1], 0.0);
        assert_eq!(d.activity[ACT_SED_RATIO + 2], 0.0);
    }

    #[test]
    fn engagement_hour_buckets() {
        let e = vec![eng(59, 0.5, 1), eng(60, 1.0, 0), eng(1439, 0.25, 2)];
        let d = aggregate_day(&[], &e).unwrap();
        assert_eq!(d.minutes_used(), 1.75);
        assert_eq!(d.times_opened(), 3.0);
        assert_eq!(d.engagement[ENG_MINUTES_HOURLY], 0.5);
        assert_eq!(d.engagement[ENG_MINUTES_HOURLY + 1], 1.0);
        assert_eq!(d.engagement[ENG_MINUTES_HOURLY + 23], 0.25);
        assert_eq!(d.engagement[ENG_OPENS_HOURLY], 1.0);
        assert_eq!(d.engagement[ENG_OPENS_HOURLY + 23], 2.0);
        d.check_invariants().unwrap();
    }

    #[test]
    fn mixed_days_rejected() {
        let mut b = act(2, 0, Intensity::Sedentary);
        b.date = day().succ_opt().unwrap();
        assert!(matches!(
            aggregate_day(&[act(1, 0, Intensity::Sedentary), b], &[]),
            Err(Error::Aggregation(_))
        ));
        let mut e = eng(3, 0.1, 0);
        e.user_id = UserId::new("u2");
        assert!(matches!(
            aggregate_day(&[act(1, 0, Intensity::Sedentary)], &[e]),
            Err(Error::Aggregation(_))
        ));
        assert!(aggregate_day(&[], &[]).is_err());
    }

    #[test]
    fn wear_boundary_is_inclusive() {
        let d0 = day();
        let days = vec![
            with_wear("u", d0, 599.0),
            with_wear("u", d0.succ_opt().unwrap(), 600.0),
        ];
        let kept = filter_valid_days(&days);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].wear_time_minutes(), 600.0);

        let zeros: Vec<_> = (0..5)
            .map(|i| with_wear("u", d0 + chrono::Days::new(i), 0.0))
            .collect();
        assert!(filter_valid_days(&zeros).is_empty());
    }

    #[test]
    fn user_boundary_is_inclusive() {
        let mk = |n: u64| -> Vec<DailyFeatures> {
            (0..n)
                .map(|i| with_wear("x", day() + chrono::Days::new(i), 700.0))
                .collect()
        };
        let mut users = UserDays::new();
        users.insert(UserId::new("nine"), mk(9));
        users.insert(UserId::new("ten"), mk(10));
        let kept = filter_valid_users(users);
        assert_eq!(
            kept.keys().map(|u| u.as_str()).collect::<Vec<_>>(),
            vec!["ten"]
        );
    }

    #[test]
    fn filters_are_idempotent() {
        let days: Vec<_> = (0..30)
            .map(|i| with_wear("u", day() + chrono::Days::new(i), (i * 37 % 900) as f64))
            .collect();
        let once = filter_valid_days(&days);
        assert_eq!(filter_valid_days(&once), once);

        let mut users = UserDays::new();
        for (k, n) in [("a", 3u64), ("b", 12), ("c", 10)] {
            users.insert(
                UserId::new(k),
                (0..n)
                    .map(|i| with_wear(k, day() + chrono::Days::new(i), 650.0))
                    .collect(),
            );
        }
        let once = filter_valid_users(users);
        assert_eq!(filter_valid_users(once.clone()), once);
    }

    #[test]
    fn daily_csv_round_trip() {
        let recs: Vec<_> = (0..700u16)
            .map(|m| {
                act(
                    m,
                    u32::from(m % 5),
                    if m % 5 == 0 {
                        Intensity::Sedentary
                    } else {
                        Intensity::Light
                    },
                )
            })
            .collect();
        let e = vec![eng(100, 0.3, 1), eng(700, 0.7, 0)];
        let d = aggregate_day(&recs, &e).unwrap();
        let mut buf = Vec::new();
        write_daily_features_csv([&d], &mut buf).unwrap();
        let back = read_daily_features_csv(buf.as_slice(), "d.csv").unwrap();
        assert_eq!(back, vec![d]);
    }

    /// Brute-force oracle: walk all 1440 minutes and accumulate each feature
    /// directly from a per-minute lookup.
    fn oracle(
        activity: &[MinuteActivityRecord],
        engagement: &[EngagementMinuteRecord],
        date: NaiveDate,
    ) -> ([f64; ENGAGEMENT_DIM], [f64; ACTIVITY_DIM]) {
        let mut e = [0.0; ENGAGEMENT_DIM];
        let mut a = [0.0; ACTIVITY_DIM];
        for m in 0..1440u16 {
            let h = usize::from(m) / 60;
            if let Some(r) = activity.iter().find(|r| r.minute_of_day == m) {
                a[0] += f64::from(r.steps);
                match r.intensity {
                    Intensity::Sedentary => a[1] += 1.0,
                    Intensity::Light => a[2] += 1.0,
                    Intensity::Mvpa => a[3] += 1.0,
                    Intensity::Nonwear => {}
                }
            }
            if let Some(r) = engagement.iter().find(|r| r.minute_of_day == m) {
                e[9 + h] += r.foreground_minutes;
                e[33 + h] += f64::from(r.opens);
                e[1] += f64::from(r.opens);
            }
        }
        a[4] = a[1] + a[2] + a[3];
        if a[4] > 0.0 {
            a[5] = a[1] / a[4];
            a[6] = a[2] / a[4];
            a[7] = a[3] / a[4];
        }
        e[0] = e[9..33].iter().sum();
        e[2 + date.weekday().num_days_from_monday() as usize] = 1.0;
        (e, a)
    }

    fn arb_day(
    ) -> impl Strategy<Value = (Vec<MinuteActivityRecord>, Vec<EngagementMinuteRecord>, u64)> {
        (
            proptest::collection::btree_map(0u16..1440, (0u8..4, 0u32..200), 0..400),
            proptest::collection::btree_map(0u16..1440, (0.0f64..=1.0, 0u32..3), 0..200),
            any::<u64>(),
        )
            .prop_map(|(acts, engs, seed)| {
                let activity = acts
                    .into_iter()
                    .map(|(m, (k, s))| {
                        let intensity = [
                            Intensity::Nonwear,
                            Intensity::Sedentary,
                            Intensity::Light,
                            Intensity::Mvpa,
                        ][usize::from(k)];
                        let steps = if intensity == Intensity::Nonwear {
                            0
                        } else {
                            s
                        };
                        act(m, steps, intensity)
                    })
                    .collect();
                let engagement = engs.into_iter().map(|(m, (f, o))| eng(m, f, o)).collect();
                (activity, engagement, seed)
            })
    }

    proptest! {
        #[test]
        fn aggregation_matches_oracle((a, e, _) in arb_day()) {
            prop_assume!(!a.is_empty() || !e.is_empty());
            let d = aggregate_day(&a, &e).unwrap();
            let (oe, oa) = oracle(&a, &e, day());
            for i in 0..ACTIVITY_DIM {
                prop_assert!((d.activity[i] - oa[i]).abs() <= 1e-12, "activity[{}] {} vs {}", i, d.activity[i], oa[i]);
            }
            for i in 0..ENGAGEMENT_DIM {
                prop_assert!((d.engagement[i] - oe[i]).abs() <= 1e-9, "engagement[{}] {} vs {}", i, d.engagement[i], oe[i]);
            }
            prop_assert!(d.check_invariants().is_ok(), "{:?}", d.check_invariants());
        }

        #[test]
        fn aggregation_is_permutation_invariant((a, e, seed) in arb_day()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            prop_assume!(!a.is_empty() || !e.is_empty());
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut a2 = a.clone();
            let mut e2 = e.clone();
            a2.shuffle(&mut rng);
            e2.shuffle(&mut rng);
            let d1 = aggregate_day(&a, &e).unwrap();
            let d2 = aggregate_day(&a2, &e2).unwrap();
            prop_assert_eq!(d1.activity, d2.activity);
            for i in 0..ENGAGEMENT_DIM {
                prop_assert!((d1.engagement[i] - d2.engagement[i]).abs() <= 1e-12);
            }
        }
    }
}
