//! Train early-fusion, late-fusion and unimodal LSTMs on one split and
//! compare test MAE against the training-mean predictor.
//!
//! ```text
//! cargo run --release --example lstm_fusion
//! ```

use stepcast::dataset::{split_participants, windows_for_users, Outcome};
use stepcast::forecasters::{train, Architecture, ModelConfig};
use stepcast::ingest::preprocess;
use stepcast::metrics::mae;
use stepcast::synth::{generate_daily, preset};

fn main() -> stepcast::Result<()> {
    let (raw, _) = generate_daily(&preset("prediabetes")?)?;
    let (users, _) = preprocess(&raw);
    let split = split_participants(users.keys(), 0.2, 0.1, 0)?;
    let w = 7;
    let windows = |ids| windows_for_users(&users, ids, w, &[Outcome::Steps], false);
    let (tr, va, te) = (
        windows(&split.train_users)?,
        windows(&split.val_users)?,
        windows(&split.test_users)?,
    );
    let actual: Vec<f64> = te
        .iter()
        .map(|e| e.target(Outcome::Steps))
        .collect::<Result<_, _>>()?;

    let train_mean = tr
        .iter()
        .map(|e| e.target(Outcome::Steps))
        .sum::<stepcast::Result<f64>>()?
        / tr.len() as f64;
    println!(
        "training mean          MAE {:>6.0}",
        mae(&vec![train_mean; te.len()], &actual)?
    );

    for architecture in [
        Architecture::LstmEarly,
        Architecture::LstmLate,
        Architecture::LstmActivity,
        Architecture::LstmEngagement,
    ] {
        let config = ModelConfig {
            architecture,
            window: w,
            hidden: 16,
            late_hidden: 16,
            max_epochs: 30,
            ..ModelConfig::default()
        };
        let model = train(&config, &tr, &va)?;
        let pred = model.predict_batch(&te)?;
        println!(
            "{:<22} MAE {:>6.0}  ({} epochs)",
            architecture.as_str(),
            mae(&pred, &actual)?,
            model.training_log.len()
        );
    }
    Ok(())
}
