//! Parse minute-level activity and engagement CSV, aggregate user-days and
//! apply the wear-time filter.
//!
//! ```text
//! cargo run --example ingest_minute_streams
//! ```

use std::fmt::Write as _;

use stepcast::ingest::{
    build_daily_features, filter_valid_days, parse_activity, parse_engagement, ACTIVITY_NAMES,
    MIN_WEAR_MINUTES,
};

fn main() -> stepcast::Result<()> {
    // Two days for one user: a long-wear day and a short-wear day.
    let mut activity = String::from("user_id,date,minute_of_day,steps,intensity\n");
    for (date, worn) in [("2024-03-04", 700u16), ("2024-03-05", 300)] {
        for m in 0..1440u16 {
            let (steps, label) = match m {
                _ if m < 420 || m >= 420 + worn => (0, "nonwear"),
                _ if m % 10 == 0 => (95, "mvpa"),
                _ if m % 3 == 0 => (30, "light"),
                _ => (0, "sedentary"),
            };
            writeln!(activity, "u01,{date},{m},{steps},{label}").unwrap();
        }
    }
    let engagement = "user_id,date,minute_of_day,foreground_minutes,opens\n\
                      u01,2024-03-04,480,1.0,1\n\
                      u01,2024-03-04,481,0.5,0\n\
                      u01,2024-03-05,1200,1.0,2\n";

    let a = parse_activity(activity.as_bytes(), "activity.csv")?;
    let e = parse_engagement(engagement.as_bytes(), "engagement.csv")?;
    println!(
        "{} activity minutes, {} engagement minutes",
        a.len(),
        e.len()
    );

    let users = build_daily_features(&a, &e)?;
    for (user, days) in &users {
        for d in days {
            println!(
                "{user} {} wear {:>4} min, steps {:>6}, app {:.1} min, opens {}",
                d.date,
                d.wear_time_minutes(),
                d.total_steps(),
                d.minutes_used(),
                d.times_opened()
            );
        }
        let kept = filter_valid_days(days);
        println!(
            "{} of {} days reach {MIN_WEAR_MINUTES} wear minutes",
            kept.len(),
            days.len()
        );
        println!("activity features: {ACTIVITY_NAMES:?}");
        println!("values of the first day: {:?}", days[0].activity);
    }
    Ok(())
}
