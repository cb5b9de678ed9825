//! Synthetic minute-level cohorts with a tunable engagement→activity
//! coupling, weekly structure and planted wear patterns.
//!
//! Each user gets a latent step level, an app-use adherence and a planted
//! number of valid days. Today's app use, standardized within the user,
//! scales tomorrow's steps by `1 + coupling · engagement`.

use std::io::Write;

use chrono::{Datelike, Days, NaiveDate};
use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{
    aggregate_day, write_activity_rows, write_engagement_rows, DailyFeatures,
    EngagementMinuteRecord, Intensity, MinuteActivityRecord, UserDays, UserId, ACTIVITY_HEADER,
    ENGAGEMENT_HEADER, MIN_VALID_DAYS, MIN_WEAR_MINUTES,
};

/// Fewest planted valid days for a regular user.
const REGULAR_MIN_VALID_DAYS: usize = MIN_VALID_DAYS + 2;
/// Standardized engagement is clamped to ± this value, then divided by it
/// plus 0.5, so normalized engagement lies in (−0.8, 0.8) and
/// `1 + coupling · engagement` stays positive for coupling below 1.25.
const ENGAGEMENT_CLAMP: f64 = 2.0;
const ENGAGEMENT_SCALE: f64 = ENGAGEMENT_CLAMP + 0.5;
const WAKING_START: u16 = 420;
const WAKING_END: u16 = 1380;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub n_users: usize,
    /// Calendar span per user.
    pub n_days: usize,
    pub seed: u64,
    pub start_date: NaiveDate,
    /// Strength of today's engagement on tomorrow's steps.
    pub coupling: f64,
    pub mean_daily_steps: f64,
    /// Between-user log-sd of the latent step level.
    pub level_sd: f64,
    pub wear_mean_hours: f64,
    pub wear_sd_hours: f64,
    /// Monday-first step multipliers.
    pub weekly_multipliers: [f64; 7],
    /// Log-sd of each user's weekday deviations from the shared cycle.
    pub weekly_user_sd: f64,
    /// Share of last week's deviation carried into this week.
    pub weekly_persistence: f64,
    /// Mean share of calendar days without a valid wear day.
    pub nonwear_prob: f64,
    /// Per-user nonwear share is uniform within ± this of the mean.
    pub nonwear_spread: f64,
    /// Log-sd of day-to-day step noise.
    pub step_noise_sd: f64,
    /// Stationary log-sd of a slowly drifting level.
    pub drift_sd: f64,
    pub drift_persistence: f64,
    /// Mean app sessions per day at full adherence.
    pub session_rate: f64,
    pub session_minutes: f64,
    /// Log-sd of the day-to-day session-rate variation.
    pub engagement_day_sd: f64,
    /// Share of users planted with fewer than 10 valid days.
    pub invalid_user_fraction: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        preset_prediabetes()
    }
}

/// 58 users over 270 days, about 155 valid days each and 5745 mean steps.
pub fn preset_prediabetes() -> CohortSpec {
    CohortSpec {
        n_users: 58,
        n_days: 270,
        seed: 0,
        start_date: NaiveDate::from_ymd_opt(2019, 1, 7).expect("valid date"),
        coupling: 0.5,
        mean_daily_steps: 5745.0,
        level_sd: 0.5,
        wear_mean_hours: 12.38,
        wear_sd_hours: 1.5,
        weekly_multipliers: [1.06, 1.08, 1.07, 1.05, 1.04, 0.9, 0.8],
        weekly_user_sd: 0.15,
        weekly_persistence: 0.6,
        nonwear_prob: 0.426,
        nonwear_spread: 0.4,
        step_noise_sd: 0.2,
        drift_sd: 0.15,
        drift_persistence: 0.97,
        session_rate: 6.0,
        session_minutes: 2.5,
        engagement_day_sd: 0.6,
        invalid_user_fraction: 3.0 / 58.0,
    }
}

/// 51 users over 60 days, about 38 valid days each and 7627 mean steps.
pub fn preset_sleep() -> CohortSpec {
    CohortSpec {
        n_users: 51,
        n_days: 60,
        mean_daily_steps: 7627.0,
        nonwear_prob: 0.369,
        nonwear_spread: 0.3,
        invalid_user_fraction: 7.0 / 51.0,
        ..preset_prediabetes()
    }
}

/// 60 users over 90 nearly fully worn days whose steps are dominated by
/// persistent per-user weekday patterns; last week carries most of the
/// signal. No engagement coupling.
pub fn preset_weekly() -> CohortSpec {
    CohortSpec {
        n_users: 60,
        n_days: 90,
        coupling: 0.0,
        mean_daily_steps: 7000.0,
        weekly_user_sd: 0.5,
        weekly_persistence: 0.9,
        nonwear_prob: 0.05,
        nonwear_spread: 0.05,
        step_noise_sd: 0.1,
        drift_sd: 0.1,
        drift_persistence: 0.9,
        invalid_user_fraction: 0.0,
        ..preset_prediabetes()
    }
}

pub const PRESETS: [&str; 3] = ["prediabetes", "sleep", "weekly"];

pub fn preset(name: &str) -> Result<CohortSpec> {
    match name {
        "prediabetes" => Ok(preset_prediabetes()),
        "sleep" => Ok(preset_sleep()),
        "weekly" => Ok(preset_weekly()),
        other => Err(Error::Config(format!(
            "unknown preset {other:?} (expected one of {PRESETS:?})"
        ))),
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_users == 0 || self.n_days == 0 {
            return bad("cohort needs at least one user and one day".into());
        }
        for (name, p) in [
            ("nonwear_prob", self.nonwear_prob),
            ("invalid_user_fraction", self.invalid_user_fraction),
            ("weekly_persistence", self.weekly_persistence),
            ("drift_persistence", self.drift_persistence),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.drift_persistence >= 1.0 || self.weekly_persistence >= 1.0 {
            return bad("persistence must stay below 1".into());
        }
        if self
            .weekly_multipliers
            .iter()
            .any(|m| !(*m > 0.0 && m.is_finite()))
        {
            return bad("weekly multipliers must be positive".into());
        }
        if !(self.wear_mean_hours > 0.0 && self.wear_mean_hours <= 24.0) {
            return bad(format!(
                "wear mean {} h is not within a day",
                self.wear_mean_hours
            ));
        }
        let nonneg = [
            ("coupling", self.coupling),
            ("mean_daily_steps", self.mean_daily_steps),
            ("level_sd", self.level_sd),
            ("wear_sd_hours", self.wear_sd_hours),
            ("weekly_user_sd", self.weekly_user_sd),
            ("nonwear_spread", self.nonwear_spread),
            ("step_noise_sd", self.step_noise_sd),
            ("drift_sd", self.drift_sd),
            ("session_rate", self.session_rate),
            ("session_minutes", self.session_minutes),
            ("engagement_day_sd", self.engagement_day_sd),
        ];
        if let Some((name, v)) = nonneg.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return bad(format!("{name} = {v} must be finite and non-negative"));
        }
        if self.session_minutes == 0.0 && self.session_rate > 0.0 {
            return bad("session_minutes must be positive when sessions occur".into());
        }
        Ok(())
    }

    pub fn user_id(&self, index: usize) -> UserId {
        let width = self.n_users.to_string().len().max(3);
        UserId::new(format!("u{index:0width$}"))
    }

    fn invalid_users(&self) -> usize {
        (self.invalid_user_fraction * self.n_users as f64).round() as usize
    }
}

/// Latent parameters of one generated user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    pub user_id: UserId,
    /// Mean daily steps before weekly, drift, coupling and noise factors.
    pub level: f64,
    /// Scales the session rate, in (0, 1].
    pub adherence: f64,
    pub nonwear_prob: f64,
    pub planted_valid_days: usize,
    pub invalid_user: bool,
    pub coupling: f64,
}

struct UserPlan {
    truth: UserTruth,
    stream: u64,
}

fn plan_users(spec: &CohortSpec) -> Result<Vec<UserPlan>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let level_noise = Normal::new(0.0, spec.level_sd).map_err(|e| Error::Config(e.to_string()))?;
    let n_invalid = spec.invalid_users().min(spec.n_users);
    // Invalid users are spread through the id range.
    let invalid: Vec<usize> = sample(&mut rng, spec.n_users, n_invalid).into_vec();
    let raw_levels: Vec<f64> = (0..spec.n_users)
        .map(|_| (level_noise.sample(&mut rng) - spec.level_sd * spec.level_sd / 2.0).exp())
        .collect();
    // Calibrate so the cohort's mean level hits the target exactly.
    let mean_raw = raw_levels.iter().sum::<f64>() / spec.n_users as f64;
    let min_regular = REGULAR_MIN_VALID_DAYS.min(spec.n_days);
    let mut plans = Vec::with_capacity(spec.n_users);
    for (i, raw) in raw_levels.into_iter().enumerate() {
        let adherence = rng.gen_range(0.2..=1.0);
        let lo = (spec.nonwear_prob - spec.nonwear_spread).max(0.0);
        let hi = (spec.nonwear_prob + spec.nonwear_spread).min(1.0);
        let nonwear = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let is_invalid = invalid.contains(&i);
        let planted = if is_invalid {
            rng.gen_range(0..MIN_VALID_DAYS).min(spec.n_days)
        } else {
            ((spec.n_days as f64 * (1.0 - nonwear)).round() as usize)
                .clamp(min_regular, spec.n_days)
        };
        plans.push(UserPlan {
            truth: UserTruth {
                user_id: spec.user_id(i),
                level: spec.mean_daily_steps * raw / mean_raw,
                adherence,
                nonwear_prob: nonwear,
                planted_valid_days: planted,
                invalid_user: is_invalid,
                coupling: spec.coupling,
            },
            stream: i as u64 + 1,
        });
    }
    Ok(plans)
}

/// Minute streams of one user, sorted by (date, minute).
pub struct UserStreams {
    pub truth: UserTruth,
    pub activity: Vec<MinuteActivityRecord>,
    pub engagement: Vec<EngagementMinuteRecord>,
}

fn truncated_normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    if sd == 0.0 {
        return mean.clamp(lo, hi);
    }
    let n = Normal::new(mean, sd).expect("sd checked");
    for _ in 0..64 {
        let x = n.sample(rng);
        if (lo..=hi).contains(&x) {
            return x;
        }
    }
    mean.clamp(lo, hi)
}

/// Per-minute session usage for a day: (foreground seconds, opens).
fn draw_sessions(rng: &mut ChaCha8Rng, rate: f64, mean_minutes: f64) -> Vec<(u16, u32, u32)> {
    let mut seconds = [0u32; 1440];
    let mut opens = [0u32; 1440];
    let k = if rate > 0.0 {
        Poisson::new(rate).expect("rate > 0").sample(rng) as usize
    } else {
        0
    };
    let len_dist = Exp::new(1.0 / mean_minutes.max(1e-9)).expect("positive");
    for _ in 0..k {
        let start = rng.gen_range(WAKING_START..WAKING_END);
        let mut remaining = ((len_dist.sample(rng).min(30.0) * 60.0).round() as u32).max(5);
        opens[usize::from(start)] += 1;
        let mut m = usize::from(start);
        while remaining > 0 && m < 1440 {
            let take = remaining.min(60 - seconds[m]);
            seconds[m] += take;
            remaining -= take;
            m += 1;
        }
    }
    (0..1440u16)
        .filter(|&m| seconds[usize::from(m)] > 0 || opens[usize::from(m)] > 0)
        .map(|m| (m, seconds[usize::from(m)], opens[usize::from(m)]))
        .collect()
}

/// Per-minute steps over a worn span summing to about `target`.
/// Zero-step minutes are sedentary, 1–99 light, 100+ moderate-to-vigorous.
fn draw_minute_steps(rng: &mut ChaCha8Rng, target: f64, wear: usize) -> Vec<u32> {
    let mut out = vec![0u32; wear];
    if target < 1.0 || wear == 0 {
        return out;
    }
    let stochastic_round = |rng: &mut ChaCha8Rng, x: f64| (x + rng.gen::<f64>()).floor() as usize;
    let k_light = stochastic_round(rng, 0.7 * target / 25.0).clamp(1, wear);
    let k_mvpa = stochastic_round(rng, 0.3 * target / 115.0).min(wear - k_light);
    let light_share = if k_mvpa == 0 { target } else { 0.7 * target };
    let light_rate = (light_share / k_light as f64).clamp(1.0, 99.0);
    let mvpa_rate = if k_mvpa == 0 {
        0.0
    } else {
        ((target - light_rate * k_light as f64) / k_mvpa as f64).max(100.0)
    };
    let slots = sample(rng, wear, k_light + k_mvpa).into_vec();
    for (j, &slot) in slots.iter().enumerate() {
        out[slot] = if j < k_light {
            (light_rate * rng.gen_range(0.5..1.5))
                .round()
                .clamp(1.0, 99.0) as u32
        } else {
            (mvpa_rate * rng.gen_range(0.8..1.2)).round().max(100.0) as u32
        };
    }
    out
}

/// Generate one user's minute streams.
fn generate_user(spec: &CohortSpec, plan: &UserPlan) -> UserStreams {
    let truth = plan.truth.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(plan.stream);
    let n = spec.n_days;
    let user = truth.user_id.clone();

    // App use first: tomorrow's steps depend on today's standardized use.
    let day_rate = Normal::new(0.0, spec.engagement_day_sd).expect("validated");
    let sd2 = spec.engagement_day_sd * spec.engagement_day_sd;
    let sessions: Vec<Vec<(u16, u32, u32)>> = (0..n)
        .map(|_| {
            let rate =
                spec.session_rate * truth.adherence * (day_rate.sample(&mut rng) - sd2 / 2.0).exp();
            draw_sessions(&mut rng, rate, spec.session_minutes)
        })
        .collect();
    let log_use: Vec<f64> = sessions
        .iter()
        .map(|s| {
            (1.0 + s
                .iter()
                .map(|&(_, sec, _)| f64::from(sec) / 60.0)
                .sum::<f64>())
            .ln()
        })
        .collect();
    let mean = log_use.iter().sum::<f64>() / n as f64;
    let sd = (log_use.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let engagement_z: Vec<f64> = log_use
        .iter()
        .map(|x| {
            if sd > 0.0 {
                ((x - mean) / sd).clamp(-ENGAGEMENT_CLAMP, ENGAGEMENT_CLAMP) / ENGAGEMENT_SCALE
            } else {
                0.0
            }
        })
        .collect();

    // Planted valid days; other days are partial wear or absent.
    let mut valid = vec![false; n];
    for i in sample(&mut rng, n, truth.planted_valid_days).into_vec() {
        valid[i] = true;
    }

    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let drift_innov = spec.drift_sd * (1.0 - spec.drift_persistence.powi(2)).sqrt();
    let mut drift = spec.drift_sd * noise.sample(&mut rng);
    let week_innov = spec.weekly_user_sd * (1.0 - spec.weekly_persistence.powi(2)).sqrt();
    let mut weekday_dev: Vec<f64> = (0..7)
        .map(|_| spec.weekly_user_sd * noise.sample(&mut rng))
        .collect();

    let wear_mean = spec.wear_mean_hours * 60.0;
    let wear_sd = spec.wear_sd_hours * 60.0;
    let mut activity = Vec::new();
    let mut engagement = Vec::new();
    for t in 0..n {
        let date = spec.start_date + Days::new(t as u64);
        let dow = date.weekday().num_days_from_monday() as usize;
        if t > 0 {
            drift = spec.drift_persistence * drift + drift_innov * noise.sample(&mut rng);
            if dow == 0 {
                for d in weekday_dev.iter_mut() {
                    *d = spec.weekly_persistence * *d + week_innov * noise.sample(&mut rng);
                }
            }
        }
        let coupling = if t > 0 {
            1.0 + spec.coupling * engagement_z[t - 1]
        } else {
            1.0
        };
        let step_noise =
            spec.step_noise_sd * noise.sample(&mut rng) - spec.step_noise_sd.powi(2) / 2.0;
        let intended = truth.level
            * spec.weekly_multipliers[dow]
            * (weekday_dev[dow] + drift + step_noise).exp()
            * coupling.max(0.0);

        let wear_minutes = if valid[t] {
            truncated_normal(
                &mut rng,
                wear_mean,
                wear_sd,
                MIN_WEAR_MINUTES,
                f64::from(WAKING_END),
            )
            .round() as usize
        } else if rng.gen_bool(0.5) {
            rng.gen_range(30..MIN_WEAR_MINUTES as usize)
        } else {
            0
        };
        if wear_minutes > 0 {
            let scaled = intended * wear_minutes as f64 / wear_mean;
            let per_minute = draw_minute_steps(&mut rng, scaled, wear_minutes);
            // Wear starts between 05:00 and 08:00 when the span allows it.
            let latest = 1440 - wear_minutes;
            let earliest = latest.min(300);
            let start = rng.gen_range(earliest..=latest.min(480).max(earliest));
            for (k, &steps) in per_minute.iter().enumerate() {
                let intensity = match steps {
                    0 => Intensity::Sedentary,
                    1..=99 => Intensity::Light,
                    _ => Intensity::Mvpa,
                };
                activity.push(MinuteActivityRecord {
                    user_id: user.clone(),
                    date,
                    minute_of_day: (start + k) as u16,
                    steps,
                    intensity,
                });
            }
        }
        for &(minute, seconds, opens) in &sessions[t] {
            engagement.push(EngagementMinuteRecord {
                user_id: user.clone(),
                date,
                minute_of_day: minute,
                foreground_minutes: f64::from(seconds) / 60.0,
                opens,
            });
        }
    }
    UserStreams {
        truth,
        activity,
        engagement,
    }
}

/// Generate every user's streams in parallel, in user order.
pub fn generate_users(spec: &CohortSpec) -> Result<Vec<UserStreams>> {
    let plans = plan_users(spec)?;
    Ok(plans.par_iter().map(|p| generate_user(spec, p)).collect())
}

/// Aggregate a user's streams into calendar days through the ingest path.
pub fn aggregate_user(streams: &UserStreams) -> Result<Vec<DailyFeatures>> {
    let (act, eng) = (&streams.activity, &streams.engagement);
    let mut days = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < act.len() || j < eng.len() {
        let date = match (act.get(i), eng.get(j)) {
            (Some(a), Some(e)) => a.date.min(e.date),
            (Some(a), None) => a.date,
            (None, Some(e)) => e.date,
            (None, None) => unreachable!(),
        };
        let i0 = i;
        while i < act.len() && act[i].date == date {
            i += 1;
        }
        let j0 = j;
        while j < eng.len() && eng[j].date == date {
            j += 1;
        }
        days.push(aggregate_day(&act[i0..i], &eng[j0..j])?);
    }
    Ok(days)
}

/// All calendar days with any record, aggregated per user, plus the
/// ground truth. Minute streams are dropped user by user.
pub fn generate_daily(spec: &CohortSpec) -> Result<(UserDays, Vec<UserTruth>)> {
    let plans = plan_users(spec)?;
    let per_user = plans
        .par_iter()
        .map(|p| {
            let streams = generate_user(spec, p);
            Ok((streams.truth.clone(), aggregate_user(&streams)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut users = UserDays::new();
    let mut truths = Vec::with_capacity(per_user.len());
    for (truth, days) in per_user {
        if !days.is_empty() {
            users.insert(truth.user_id.clone(), days);
        }
        truths.push(truth);
    }
    Ok((users, truths))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub users: usize,
    pub activity_rows: usize,
    pub engagement_rows: usize,
}

pub const GROUND_TRUTH_HEADER: [&str; 7] = [
    "user_id",
    "level",
    "adherence",
    "nonwear_prob",
    "planted_valid_days",
    "invalid_user",
    "coupling",
];

pub fn write_ground_truth_csv<W: Write>(truths: &[UserTruth], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(GROUND_TRUTH_HEADER)?;
    for t in truths {
        w.write_record([
            t.user_id.to_string(),
            t.level.to_string(),
            t.adherence.to_string(),
            t.nonwear_prob.to_string(),
            t.planted_valid_days.to_string(),
            t.invalid_user.to_string(),
            t.coupling.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("ground truth", e))?;
    Ok(())
}

/// Stream the cohort as activity, engagement and ground-truth CSVs.
/// Users are generated in parallel batches and written in id order, so the
/// bytes depend only on the spec.
pub fn generate_cohort<A: Write, E: Write, G: Write>(
    spec: &CohortSpec,
    mut activity: A,
    mut engagement: E,
    ground_truth: G,
) -> Result<CohortSummary> {
    let plans = plan_users(spec)?;
    let io = |e| Error::io("generated stream", e);
    writeln!(activity, "{}", ACTIVITY_HEADER.join(",")).map_err(io)?;
    writeln!(engagement, "{}", ENGAGEMENT_HEADER.join(",")).map_err(io)?;
    let mut summary = CohortSummary::default();
    let mut truths = Vec::with_capacity(plans.len());
    let batch = rayon::current_num_threads().max(1);
    for chunk in plans.chunks(batch) {
        let generated: Vec<UserStreams> =
            chunk.par_iter().map(|p| generate_user(spec, p)).collect();
        for s in generated {
            write_activity_rows(&s.activity, &mut activity).map_err(io)?;
            write_engagement_rows(&s.engagement, &mut engagement).map_err(io)?;
            summary.users += 1;
            summary.activity_rows += s.activity.len();
            summary.engagement_rows += s.engagement.len();
            truths.push(s.truth);
        }
    }
    activity.flush().map_err(io)?;
    engagement.flush().map_err(io)?;
    write_ground_truth_csv(&truths, ground_truth)?;
    Ok(summary)
}

/// Pearson correlation between a day's app minutes and the next calendar
/// day's steps, after removing each user's means. Pairs need both days
/// present in `users`.
pub fn lagged_engagement_correlation(users: &UserDays) -> f64 {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for days in users.values() {
        let pairs: Vec<(f64, f64)> = days
            .windows(2)
            .filter(|p| (p[1].date - p[0].date).num_days() == 1)
            .map(|p| (p[0].minutes_used(), p[1].total_steps()))
            .collect();
        if pairs.len() < 2 {
            continue;
        }
        let mx = pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64;
        let my = pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64;
        for (x, y) in pairs {
            xs.push(x - mx);
            ys.push(y - my);
        }
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let syy: f64 = ys.iter().map(|y| y * y).sum();
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{filter_valid_days, parse_activity, parse_engagement, preprocess};

    fn small(seed: u64) -> CohortSpec {
        CohortSpec {
            n_users: 6,
            n_days: 25,
            seed,
            ..preset_prediabetes()
        }
    }

    #[test]
    fn spec_validation() {
        assert!(preset_prediabetes().validate().is_ok());
        assert!(preset_sleep().validate().is_ok());
        let bad = CohortSpec {
            wear_mean_hours: 25.0,
            ..small(0)
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = CohortSpec {
            nonwear_prob: 1.5,
            ..small(0)
        };
        assert!(bad.validate().is_err());
        let mut bad = small(0);
        bad.weekly_multipliers[3] = 0.0;
        assert!(bad.validate().is_err());
        assert!(preset("nope").is_err());
    }

    fn csv_bytes(spec: &CohortSpec) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let (mut a, mut e, mut g) = (Vec::new(), Vec::new(), Vec::new());
        generate_cohort(spec, &mut a, &mut e, &mut g).unwrap();
        (a, e, g)
    }

    #[test]
    fn output_is_deterministic_and_seeded() {
        let spec = small(3);
        assert_eq!(csv_bytes(&spec), csv_bytes(&spec));
        assert_ne!(csv_bytes(&spec).0, csv_bytes(&small(4)).0);
    }

    #[test]
    fn streams_pass_ingest_checks_and_match_in_memory_days() {
        let spec = small(5);
        let (a, e, _) = csv_bytes(&spec);
        let act = parse_activity(a.as_slice(), "activity.csv").unwrap();
        let eng = parse_engagement(e.as_slice(), "engagement.csv").unwrap();
        assert!(act.len() <= spec.n_users * spec.n_days * 1440);
        let from_csv = crate::ingest::build_daily_features(&act, &eng).unwrap();
        let (in_memory, truths) = generate_daily(&spec).unwrap();
        assert_eq!(from_csv, in_memory);
        for days in in_memory.values() {
            for d in days {
                d.check_invariants().unwrap();
            }
        }
        // planted valid-day counts are exact
        for t in &truths {
            let valid = in_memory
                .get(&t.user_id)
                .map_or(0, |d| filter_valid_days(d).len());
            assert_eq!(valid, t.planted_valid_days, "{}", t.user_id);
        }
    }

    #[test]
    fn minute_steps_follow_intensity_thresholds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for target in [0.0, 50.0, 800.0, 6000.0, 25000.0] {
            let m = draw_minute_steps(&mut rng, target, 700);
            assert_eq!(m.len(), 700);
            let total: u32 = m.iter().sum();
            if target > 0.0 {
                assert!(
                    (f64::from(total) - target).abs() / target < 0.35,
                    "{target} → {total}"
                );
            }
        }
    }

    #[test]
    fn zero_coupling_gives_no_lagged_correlation() {
        let spec = CohortSpec {
            n_users: 60,
            n_days: 180,
            coupling: 0.0,
            seed: 11,
            ..preset_prediabetes()
        };
        let (users, _) = generate_daily(&spec).unwrap();
        let (kept, _) = preprocess(&users);
        let r = lagged_engagement_correlation(&kept);
        assert!(r.abs() < 0.05, "r = {r}");
    }

    #[test]
    fn coupling_raises_lagged_correlation_monotonically() {
        let mut rs = Vec::new();
        for coupling in [0.0, 0.25, 0.5] {
            let spec = CohortSpec {
                n_users: 60,
                n_days: 180,
                coupling,
                seed: 11,
                ..preset_prediabetes()
            };
            let (users, _) = generate_daily(&spec).unwrap();
            rs.push(lagged_engagement_correlation(&preprocess(&users).0));
        }
        assert!(rs[0] < rs[1] && rs[1] < rs[2], "{rs:?}");
        assert!(rs[2] > 0.3, "{rs:?}");
    }

    #[test]
    fn presets_hit_calibration_targets() {
        let spec = CohortSpec {
            seed: 7,
            ..preset_prediabetes()
        };
        let (users, _) = generate_daily(&spec).unwrap();
        let (kept, summary) = preprocess(&users);
        assert!(kept.len() >= 50, "{summary:?}");
        assert!(
            (summary.mean_valid_days / 155.0 - 1.0).abs() <= 0.2,
            "{summary:?}"
        );
        assert!(
            (summary.mean_wear_hours / 12.38 - 1.0).abs() <= 0.1,
            "{summary:?}"
        );

        let spec = CohortSpec {
            seed: 7,
            ..preset_sleep()
        };
        let (users, _) = generate_daily(&spec).unwrap();
        let (kept, summary) = preprocess(&users);
        assert_eq!(kept.len(), 44);
        assert!(
            (summary.mean_daily_steps / 7627.0 - 1.0).abs() <= 0.1,
            "{summary:?}"
        );
        assert!(
            (summary.mean_wear_hours / 12.38 - 1.0).abs() <= 0.1,
            "{summary:?}"
        );
    }

    #[test]
    fn presets_resolve_by_name() {
        for name in PRESETS {
            preset(name).unwrap().validate().unwrap();
        }
        assert_eq!(preset("sleep").unwrap(), preset_sleep());
        assert!(matches!(preset("nope"), Err(Error::Config(_))));
    }
}
