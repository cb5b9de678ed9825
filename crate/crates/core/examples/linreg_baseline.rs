//! Ordinary least squares on flattened windows, first on a toy design with
//! known coefficients, then as a next-day step forecaster per modality.
//!
//! ```text
//! cargo run --release --example linreg_baseline
//! ```

use stepcast::autodiff::Tensor;
use stepcast::dataset::{split_participants, windows_for_users, Outcome};
use stepcast::forecasters::{fit_ols, train, Architecture, ModelConfig};
use stepcast::ingest::preprocess;
use stepcast::metrics::mae;
use stepcast::synth::{generate_daily, preset};

fn main() -> stepcast::Result<()> {
    // y = 2 + 3·x0 − x1, exactly.
    let rows: Vec<[f64; 2]> = (0..20)
        .map(|i| [i as f64 * 0.5, (i * i % 7) as f64])
        .collect();
    let y: Vec<f64> = rows.iter().map(|r| 2.0 + 3.0 * r[0] - r[1]).collect();
    let x = Tensor::matrix(rows.len(), 2, rows.concat())?;
    let fit = fit_ols(&x, &y)?;
    println!(
        "intercept {:.6}, coefficients {:.6?}",
        fit.intercept, fit.coefficients
    );

    let (raw, _) = generate_daily(&preset("prediabetes")?)?;
    let (users, _) = preprocess(&raw);
    let split = split_participants(users.keys(), 0.2, 0.1, 0)?;
    let windows = |ids| windows_for_users(&users, ids, 7, &[Outcome::Steps], false);
    let (tr, te) = (windows(&split.train_users)?, windows(&split.test_users)?);
    let actual: Vec<f64> = te
        .iter()
        .map(|e| e.target(Outcome::Steps))
        .collect::<Result<_, _>>()?;
    for architecture in [
        Architecture::LinregActivity,
        Architecture::LinregEngagement,
        Architecture::LinregMultimodal,
    ] {
        let config = ModelConfig {
            architecture,
            ..ModelConfig::default()
        };
        let model = train(&config, &tr, &[])?;
        println!(
            "{:<18} MAE {:>6.0}",
            architecture.as_str(),
            mae(&model.predict_batch(&te)?, &actual)?
        );
    }
    Ok(())
}
