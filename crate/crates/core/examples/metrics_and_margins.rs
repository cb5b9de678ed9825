//! Regression and goal-classification metrics, relative margins and the
//! per-user breakdown.
//!
//! ```text
//! cargo run --example metrics_and_margins
//! ```

use stepcast::forecasters::ModelConfig;
use stepcast::ingest::UserId;
use stepcast::metrics::{
    accuracy_f1, format_margin, mae, nrmse, relative_margin, rmse, Confusion, MetricsReport,
};

fn main() -> stepcast::Result<()> {
    let actual = [5200.0, 7400.0, 9100.0, 6100.0, 3000.0];
    let predicted = [5600.0, 7000.0, 8000.0, 6900.0, 3500.0];
    println!(
        "MAE {:.1}  RMSE {:.1}  NRMSE {:.4}",
        mae(&predicted, &actual)?,
        rmse(&predicted, &actual)?,
        nrmse(&predicted, &actual)?
    );

    let goal = |v: &f64| *v > 6000.0;
    let truth: Vec<bool> = actual.iter().map(goal).collect();
    let guess: Vec<bool> = predicted.iter().map(goal).collect();
    let c = Confusion::from_labels(&guess, &truth)?;
    let (acc, f1) = accuracy_f1(&guess, &truth)?;
    println!("goal > 6000: {c:?}, accuracy {acc:.2}, F1 {f1:.3}");

    // Negative margin: the model's MAE is lower than the baseline's.
    for (model, baseline) in [(1989.0, 2978.0), (4194.0, 4100.0), (2500.0, 2500.0)] {
        let m = relative_margin(model, baseline)?;
        println!("MAE {model} vs {baseline}: {}", format_margin(m));
    }

    // Pooled MAE equals the window-weighted mean of per-user MAEs.
    let users: Vec<UserId> = ["a", "a", "b", "b", "b"].iter().map(UserId::new).collect();
    let mut report = MetricsReport::regression(
        "example",
        &ModelConfig::default(),
        &users,
        &predicted,
        &actual,
    )?;
    report.add_margin("training_mean", 1800.0)?;
    for (user, m) in &report.per_user {
        println!("user {user}: {} windows, MAE {:.1}", m.m, m.mae);
    }
    println!(
        "pooled {:.1} = weighted {:.1}; margin vs training mean {}",
        report.mae,
        report.weighted_user_mae(),
        format_margin(report.margins["training_mean"])
    );
    Ok(())
}
