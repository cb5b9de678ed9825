//! Fit ARIMA by conditional sum of squares: recover an AR(1) coefficient,
//! then run the per-user rolling protocol on synthetic step series.
//!
//! ```text
//! cargo run --release --example arima_baseline
//! ```

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use stepcast::forecasters::{evaluate_arima_protocol, fit_arima, forecast_one, ArimaOrder};
use stepcast::ingest::preprocess;
use stepcast::metrics::mae;
use stepcast::synth::{generate_daily, preset};

fn main() -> stepcast::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut series = vec![0.0f64];
    for _ in 1..400 {
        let prev = *series.last().unwrap();
        series.push(0.6 * prev + noise.sample(&mut rng));
    }
    let fit = fit_arima(&series, ArimaOrder::new(1, 0, 0))?;
    println!("AR(1) with phi = 0.6: estimated {:.3}", fit.ar[0]);
    println!(
        "next value after the series: {:.3}",
        forecast_one(&fit, &series)?
    );

    let (raw, _) = generate_daily(&preset("prediabetes")?)?;
    let (users, _) = preprocess(&raw);
    let steps: BTreeMap<_, Vec<f64>> = users
        .iter()
        .map(|(u, days)| (u.clone(), days.iter().map(|d| d.total_steps()).collect()))
        .collect();
    let eval = evaluate_arima_protocol(&steps, Some(ArimaOrder::new(1, 1, 1)))?;
    let errors = eval.absolute_errors();
    let (pred, actual): (Vec<f64>, Vec<f64>) = eval
        .per_user
        .values()
        .flat_map(|u| u.predictions.iter().copied().zip(u.actuals.iter().copied()))
        .unzip();
    println!(
        "ARIMA(1,1,1) over {} users ({} excluded): {} forecasts, MAE {:.0}",
        eval.per_user.len(),
        eval.excluded.len(),
        errors.len(),
        mae(&pred, &actual)?
    );
    let fallbacks = eval.per_user.values().filter(|u| u.fit.fell_back()).count();
    println!("{fallbacks} users fell back to a simpler order");
    Ok(())
}
