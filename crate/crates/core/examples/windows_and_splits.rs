//! Sliding windows, participant-level splits, train-only normalization,
//! goal labels and engagement cohorts.
//!
//! ```text
//! cargo run --release --example windows_and_splits
//! ```

use stepcast::dataset::{
    apply_normalization, build_windows, fit_normalization, label_goal, select_engaged_cohort,
    split_participants, windows_for_users, Outcome,
};
use stepcast::ingest::preprocess;
use stepcast::synth::{generate_daily, preset};

fn main() -> stepcast::Result<()> {
    let (raw, _) = generate_daily(&preset("prediabetes")?)?;
    let (users, _) = preprocess(&raw);

    let (first, days) = users.iter().next().expect("cohort is non-empty");
    for w in [3, 7, 14, 21] {
        let n = build_windows(days, w, &[Outcome::Steps], false)?.len();
        println!("{first}: {} days, w = {w:>2} -> {n} windows", days.len());
    }

    let split = split_participants(users.keys(), 0.2, 0.1, 42)?;
    println!(
        "split: {} train / {} val / {} test users",
        split.train_users.len(),
        split.val_users.len(),
        split.test_users.len()
    );
    let outcomes = [Outcome::Steps];
    let train = windows_for_users(&users, &split.train_users, 7, &outcomes, false)?;
    let test = windows_for_users(&users, &split.test_users, 7, &outcomes, false)?;

    // Statistics come from training windows only.
    let stats = fit_normalization(&train)?;
    let steps = stats.target_stats(Outcome::Steps)?;
    println!(
        "train steps target: mean {:.0}, sd {:.0}",
        steps.mean, steps.std
    );
    let normalized = apply_normalization(&test[0], &stats)?;
    println!(
        "first normalized test target: {:.3}",
        normalized.target(Outcome::Steps)?
    );

    let over = test
        .iter()
        .filter(|e| label_goal(e, 8000.0).unwrap_or(false))
        .count();
    println!(
        "{over} of {} test windows exceed 8000 steps the next day",
        test.len()
    );

    for p in [0.0, 25.0, 50.0, 75.0] {
        println!(
            "engagement >= p{p:.0}: {} users",
            select_engaged_cohort(&users, p).len()
        );
    }
    Ok(())
}
